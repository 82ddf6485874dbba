#include "npssl/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace npssl {

namespace {

constexpr char kMagic[8] = {'N', 'P', 'S', 'S', 'L', 'C', 'K', '1'};
constexpr std::uint32_t kVersion = 1;

std::uint64_t fnv1a(const std::string& bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

struct Writer {
    std::string out;

    void bytes(const void* p, std::size_t n) {
        out.append(static_cast<const char*>(p), n);
    }
    void u32(std::uint32_t v) { bytes(&v, sizeof v); }
    void u64(std::uint64_t v) { bytes(&v, sizeof v); }
    void f64(double v) { bytes(&v, sizeof v); }
    void str(const std::string& s) {
        u64(s.size());
        bytes(s.data(), s.size());
    }
    void tensor(const Tensor& t) {
        u32(static_cast<std::uint32_t>(t.rank()));
        for (std::size_t d : t.shape()) u64(d);
        bytes(t.data().data(), t.data().size() * sizeof(double));
    }
};

struct Reader {
    const std::string& in;
    std::size_t pos = 0;
    const std::string& path;

    void bytes(void* p, std::size_t n) {
        if (pos + n > in.size()) throw std::runtime_error(path + ": truncated checkpoint");
        std::memcpy(p, in.data() + pos, n);
        pos += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, sizeof v);
        return v;
    }
    std::uint64_t u64() {
        std::uint64_t v;
        bytes(&v, sizeof v);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, sizeof v);
        return v;
    }
    std::string str() {
        const std::uint64_t n = u64();
        if (pos + n > in.size()) throw std::runtime_error(path + ": truncated checkpoint");
        std::string s(in.data() + pos, n);
        pos += n;
        return s;
    }
    Tensor tensor() {
        const std::uint32_t rank = u32();
        if (rank < 1 || rank > 4) throw std::runtime_error(path + ": bad tensor rank");
        std::vector<std::size_t> shape(rank);
        std::size_t total = 1;
        for (auto& d : shape) {
            d = u64();
            total *= d;
        }
        std::vector<double> data(total);
        bytes(data.data(), total * sizeof(double));
        return Tensor(std::move(shape), std::move(data));
    }
};

void write_params(Writer& w, const NpParams& p, BackboneKind kind) {
    std::uint32_t count = 0;
    for_each_param(const_cast<NpParams&>(p), kind, [&](const char*, Tensor&) { ++count; });
    w.u32(count);
    for_each_param(const_cast<NpParams&>(p), kind, [&](const char* name, Tensor& t) {
        w.str(name);
        w.tensor(t);
    });
}

void read_params(Reader& r, NpParams& p, BackboneKind kind) {
    const std::uint32_t count = r.u32();
    std::uint32_t expected = 0;
    for_each_param(p, kind, [&](const char*, Tensor&) { ++expected; });
    if (count != expected) throw std::runtime_error(r.path + ": parameter count mismatch");
    for_each_param(p, kind, [&](const char* name, Tensor& t) {
        const std::string stored = r.str();
        if (stored != name)
            throw std::runtime_error(r.path + ": unexpected tensor `" + stored + "`, wanted `" +
                                     name + "`");
        t = r.tensor();
    });
}

void write_bank(Writer& w, const MemoryBank& b) {
    w.u64(b.capacity());
    w.u64(b.width());
    w.u64(b.size());
    w.u64(b.inserted());
    for (const auto& row : b.contents())
        w.bytes(row.data(), row.size() * sizeof(double));
}

MemoryBank read_bank(Reader& r) {
    const std::uint64_t capacity = r.u64();
    const std::uint64_t width = r.u64();
    const std::uint64_t count = r.u64();
    const std::uint64_t inserted = r.u64();
    MemoryBank bank(capacity, width);
    std::deque<std::vector<double>> rows;
    for (std::uint64_t i = 0; i < count; ++i) {
        std::vector<double> row(width);
        r.bytes(row.data(), width * sizeof(double));
        rows.push_back(std::move(row));
    }
    bank.restore(std::move(rows), inserted);
    return bank;
}

}  // namespace

void save_checkpoint(const std::string& path, const TrainerState& state, const RunConfig& config) {
    Writer w;
    w.bytes(kMagic, sizeof kMagic);
    w.u32(kVersion);
    w.str(serialize_config(config));
    w.u64(state.step);
    w.u64(state.shape.input_dim);
    w.u64(state.shape.image_h);
    w.u64(state.shape.image_w);
    w.u64(state.shape.classes);
    const BackboneKind kind = config.model.backbone;
    write_params(w, state.params, kind);
    write_params(w, state.ema, kind);
    write_params(w, state.velocity, kind);
    write_bank(w, state.latent_bank);
    write_bank(w, state.det_bank);
    w.u64(fnv1a(w.out));

    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw std::runtime_error("cannot open " + tmp + " for writing");
        out.write(w.out.data(), static_cast<std::streamsize>(w.out.size()));
        if (!out) throw std::runtime_error("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0)
        throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t))
        throw std::runtime_error(path + ": truncated checkpoint");

    const std::string payload = bytes.substr(0, bytes.size() - sizeof(std::uint64_t));
    std::uint64_t stored_sum = 0;
    std::memcpy(&stored_sum, bytes.data() + payload.size(), sizeof stored_sum);
    if (fnv1a(payload) != stored_sum)
        throw std::runtime_error(path + ": checksum error (corrupt checkpoint)");

    Reader r{payload, 0, path};
    char magic[8];
    r.bytes(magic, sizeof magic);
    if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
        throw std::runtime_error(path + ": not a checkpoint file");
    const std::uint32_t version = r.u32();
    if (version != kVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));

    LoadedCheckpoint out;
    out.config = parse_config(r.str());
    out.state.step = r.u64();
    out.state.shape.cfg = out.config.model;
    out.state.shape.input_dim = r.u64();
    out.state.shape.image_h = r.u64();
    out.state.shape.image_w = r.u64();
    out.state.shape.classes = r.u64();

    // size the tensors before reading into them
    out.state.params = init_params(out.state.shape, 0);
    out.state.ema = out.state.params;
    out.state.velocity = out.state.params;
    const BackboneKind kind = out.config.model.backbone;
    read_params(r, out.state.params, kind);
    read_params(r, out.state.ema, kind);
    read_params(r, out.state.velocity, kind);
    out.state.latent_bank = read_bank(r);
    out.state.det_bank = read_bank(r);
    if (r.pos != payload.size()) throw std::runtime_error(path + ": trailing bytes in checkpoint");
    return out;
}

}  // namespace npssl
