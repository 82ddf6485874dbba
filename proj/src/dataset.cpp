#include "npssl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "npssl/rng.hpp"

namespace npssl {

namespace {

constexpr double kPi = 3.141592653589793238462643383279502884;

void standardize(Dataset& ds) {
    const std::size_t n = ds.size(), f = ds.feature_dim;
    if (n == 0) return;
    std::vector<double> mean(f, 0.0), sq(f, 0.0);
    for (const auto& s : ds.samples)
        for (std::size_t j = 0; j < f; ++j) mean[j] += s[j];
    for (std::size_t j = 0; j < f; ++j) mean[j] /= static_cast<double>(n);
    for (const auto& s : ds.samples)
        for (std::size_t j = 0; j < f; ++j) {
            const double d = s[j] - mean[j];
            sq[j] += d * d;
        }
    for (std::size_t j = 0; j < f; ++j) {
        double sd = std::sqrt(sq[j] / static_cast<double>(n));
        if (sd < 1e-12) sd = 1.0;
        sq[j] = sd;
    }
    for (auto& s : ds.samples)
        for (std::size_t j = 0; j < f; ++j) s[j] = (s[j] - mean[j]) / sq[j];
}

}  // namespace

std::vector<std::size_t> Dataset::indices_of(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < split.size(); ++i)
        if (split[i] == s) out.push_back(i);
    return out;
}

Tensor Dataset::gather(const std::vector<std::size_t>& idx) const {
    const std::size_t n = idx.size();
    if (kind == DataKind::Image) {
        Tensor out({std::max<std::size_t>(n, 1), 1, image_h, image_w});
        if (n == 0) return Tensor({1, 1, image_h, image_w});
        for (std::size_t i = 0; i < n; ++i)
            std::copy(samples[idx[i]].begin(), samples[idx[i]].end(),
                      out.data().begin() + i * feature_dim);
        return out;
    }
    Tensor out({std::max<std::size_t>(n, 1), feature_dim});
    if (n == 0) return Tensor({1, feature_dim});
    for (std::size_t i = 0; i < n; ++i)
        std::copy(samples[idx[i]].begin(), samples[idx[i]].end(),
                  out.data().begin() + i * feature_dim);
    return out;
}

Dataset make_two_moons(std::size_t n, double noise, std::uint64_t seed) {
    if (n < 2) throw std::invalid_argument("two-moons: need at least 2 samples");
    Dataset ds;
    ds.kind = DataKind::Vector;
    ds.feature_dim = 2;
    ds.classes = 2;
    Rng rng(derive_seed(seed, 0x6d6f6f6eu));
    const std::size_t n0 = n / 2, n1 = n - n0;
    for (std::size_t i = 0; i < n0; ++i) {
        const double t = kPi * static_cast<double>(i) / static_cast<double>(n0 - 1 ? n0 - 1 : 1);
        ds.samples.push_back({std::cos(t) + noise * rng.normal(), std::sin(t) + noise * rng.normal()});
        ds.labels.push_back(0);
    }
    for (std::size_t i = 0; i < n1; ++i) {
        const double t = kPi * static_cast<double>(i) / static_cast<double>(n1 - 1 ? n1 - 1 : 1);
        ds.samples.push_back(
            {1.0 - std::cos(t) + noise * rng.normal(), 0.5 - std::sin(t) + noise * rng.normal()});
        ds.labels.push_back(1);
    }
    ds.split.assign(ds.size(), Split::Labeled);
    standardize(ds);
    return ds;
}

// Gaussian blobs on a circle; class 0 sits near the origin so its cluster
// overlaps the others' tails, giving the classes unequal difficulty.
Dataset make_blobs(std::size_t n, std::size_t classes, std::uint64_t seed) {
    if (classes < 2) throw std::invalid_argument("blobs: need at least 2 classes");
    if (n < classes) throw std::invalid_argument("blobs: need at least one sample per class");
    Dataset ds;
    ds.kind = DataKind::Vector;
    ds.feature_dim = 2;
    ds.classes = classes;
    Rng rng(derive_seed(seed, 0x626c6f62u));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t c = i % classes;
        const double radius = (c == 0) ? 0.9 : 3.2;
        const double angle = 2.0 * kPi * static_cast<double>(c) / static_cast<double>(classes) + 0.4;
        ds.samples.push_back({radius * std::cos(angle) + rng.normal(),
                              radius * std::sin(angle) + rng.normal()});
        ds.labels.push_back(static_cast<int>(c));
    }
    ds.split.assign(ds.size(), Split::Labeled);
    standardize(ds);
    return ds;
}

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(field);
            field.clear();
        } else if (c != '\r') {
            field += c;
        }
    }
    out.push_back(field);
    return out;
}

[[noreturn]] void parse_fail(const std::string& path, std::size_t line_no, const std::string& why) {
    throw std::runtime_error(path + ":" + std::to_string(line_no) + ": parse error: " + why);
}

}  // namespace

Dataset load_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::string line;
    if (!std::getline(in, line)) parse_fail(path, 1, "missing header row");
    const auto header = split_csv_line(line);
    std::ptrdiff_t label_col = -1;
    for (std::size_t i = 0; i < header.size(); ++i)
        if (header[i] == "label") label_col = static_cast<std::ptrdiff_t>(i);
    if (label_col < 0) parse_fail(path, 1, "no `label` column in header");

    Dataset ds;
    ds.kind = DataKind::Vector;
    ds.feature_dim = header.size() - 1;
    if (ds.feature_dim == 0) parse_fail(path, 1, "no feature columns");

    std::size_t line_no = 1;
    int max_label = -1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto fields = split_csv_line(line);
        if (fields.size() != header.size())
            parse_fail(path, line_no,
                       "expected " + std::to_string(header.size()) + " fields, got " +
                           std::to_string(fields.size()));
        std::vector<double> row;
        row.reserve(ds.feature_dim);
        int label = kUnlabeled;
        for (std::size_t i = 0; i < fields.size(); ++i) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(fields[i], &used);
            } catch (const std::exception&) {
                parse_fail(path, line_no, "non-numeric field `" + fields[i] + "`");
            }
            if (used != fields[i].size())
                parse_fail(path, line_no, "trailing junk in field `" + fields[i] + "`");
            if (static_cast<std::ptrdiff_t>(i) == label_col) {
                label = static_cast<int>(v);
                if (static_cast<double>(label) != v)
                    parse_fail(path, line_no, "non-integer label " + fields[i]);
                if (label < kUnlabeled)
                    throw std::runtime_error(path + ":" + std::to_string(line_no) +
                                             ": validation error: label out of range");
            } else {
                row.push_back(v);
            }
        }
        ds.samples.push_back(std::move(row));
        ds.labels.push_back(label);
        max_label = std::max(max_label, label);
    }
    if (ds.samples.empty()) parse_fail(path, line_no, "no data rows");
    if (max_label < 1) throw std::runtime_error(path + ": validation error: fewer than 2 classes");
    ds.classes = static_cast<std::size_t>(max_label) + 1;
    ds.split.assign(ds.size(), Split::Labeled);
    for (std::size_t i = 0; i < ds.size(); ++i)
        if (ds.labels[i] == kUnlabeled) ds.split[i] = Split::Unlabeled;
    standardize(ds);
    return ds;
}

namespace {

std::uint32_t read_be32(std::istream& in, const std::string& path, const char* what) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char*>(b), 4))
        throw std::runtime_error(path + ": parse error at byte " + std::to_string(in.tellg()) +
                                 ": truncated " + what);
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) | (std::uint32_t(b[2]) << 8) |
           std::uint32_t(b[3]);
}

}  // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path,
                 const std::string& unlabeled_list_path) {
    std::ifstream img(images_path, std::ios::binary);
    if (!img) throw std::runtime_error("cannot open " + images_path);
    if (read_be32(img, images_path, "magic") != 0x00000803u)
        throw std::runtime_error(images_path + ": parse error at byte 0: bad IDX image magic");
    const std::uint32_t n = read_be32(img, images_path, "count");
    const std::uint32_t h = read_be32(img, images_path, "rows");
    const std::uint32_t w = read_be32(img, images_path, "cols");

    std::ifstream lab(labels_path, std::ios::binary);
    if (!lab) throw std::runtime_error("cannot open " + labels_path);
    if (read_be32(lab, labels_path, "magic") != 0x00000801u)
        throw std::runtime_error(labels_path + ": parse error at byte 0: bad IDX label magic");
    if (read_be32(lab, labels_path, "count") != n)
        throw std::runtime_error(labels_path + ": validation error: image/label counts differ");

    Dataset ds;
    ds.kind = DataKind::Image;
    ds.image_h = h;
    ds.image_w = w;
    ds.feature_dim = static_cast<std::size_t>(h) * w;
    std::vector<unsigned char> buf(ds.feature_dim);
    int max_label = -1;
    double pixel_sum = 0.0;
    for (std::uint32_t i = 0; i < n; ++i) {
        if (!img.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
            throw std::runtime_error(images_path + ": parse error at byte " +
                                     std::to_string(img.tellg()) + ": truncated image data");
        std::vector<double> row(ds.feature_dim);
        for (std::size_t j = 0; j < buf.size(); ++j) {
            row[j] = static_cast<double>(buf[j]) / 255.0;
            pixel_sum += row[j];
        }
        ds.samples.push_back(std::move(row));
        char lb = 0;
        if (!lab.read(&lb, 1))
            throw std::runtime_error(labels_path + ": parse error at byte " +
                                     std::to_string(lab.tellg()) + ": truncated label data");
        ds.labels.push_back(static_cast<int>(static_cast<unsigned char>(lb)));
        max_label = std::max(max_label, ds.labels.back());
    }
    if (ds.samples.empty()) throw std::runtime_error(images_path + ": validation error: empty dataset");
    if (max_label < 1)
        throw std::runtime_error(labels_path + ": validation error: fewer than 2 classes");
    ds.classes = static_cast<std::size_t>(max_label) + 1;
    ds.pixel_mean = pixel_sum / static_cast<double>(ds.size() * ds.feature_dim);
    ds.split.assign(ds.size(), Split::Labeled);

    if (!unlabeled_list_path.empty()) {
        std::ifstream ul(unlabeled_list_path);
        if (!ul) throw std::runtime_error("cannot open " + unlabeled_list_path);
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(ul, line)) {
            ++line_no;
            if (line.empty()) continue;
            std::size_t used = 0;
            long idx = 0;
            try {
                idx = std::stol(line, &used);
            } catch (const std::exception&) {
                parse_fail(unlabeled_list_path, line_no, "non-integer index");
            }
            if (used != line.size() || idx < 0 || static_cast<std::size_t>(idx) >= ds.size())
                parse_fail(unlabeled_list_path, line_no, "index out of range");
            ds.labels[static_cast<std::size_t>(idx)] = kUnlabeled;
            ds.split[static_cast<std::size_t>(idx)] = Split::Unlabeled;
        }
    }
    return ds;
}

void split_ssl(Dataset& ds, std::size_t labels_per_class, double test_fraction, std::uint64_t seed) {
    if (test_fraction < 0.0 || test_fraction >= 1.0)
        throw std::invalid_argument("split_ssl: test_fraction outside [0,1)");
    const std::size_t n = ds.size();
    Rng rng(derive_seed(seed, 0x73706c69u));
    const auto order = rng.sample_without_replacement(n, n);

    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(n)));
    std::vector<bool> is_test(n, false);
    std::size_t assigned = 0;
    for (std::size_t i = 0; i < n && assigned < n_test; ++i) {
        if (ds.labels[order[i]] == kUnlabeled) continue;  // test needs true labels
        is_test[order[i]] = true;
        ++assigned;
    }

    std::vector<std::size_t> per_class(ds.classes, 0);
    for (std::size_t i = 0; i < n; ++i) {
        ds.split[i] = is_test[i] ? Split::Test : Split::Unlabeled;
    }
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t idx = order[i];
        if (is_test[idx] || ds.labels[idx] == kUnlabeled) continue;
        const auto c = static_cast<std::size_t>(ds.labels[idx]);
        if (per_class[c] < labels_per_class) {
            ds.split[idx] = Split::Labeled;
            ++per_class[c];
        }
    }
    for (std::size_t c = 0; c < ds.classes; ++c)
        if (per_class[c] < labels_per_class)
            throw std::invalid_argument("split_ssl: class " + std::to_string(c) + " has only " +
                                        std::to_string(per_class[c]) + " train samples, need " +
                                        std::to_string(labels_per_class));
}

}  // namespace npssl
