#include "npssl/config.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace npssl {

namespace {

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::string backbone_to_string(BackboneKind k) { return k == BackboneKind::Mlp ? "mlp" : "conv"; }

BackboneKind backbone_from_string(const std::string& s) {
    if (s == "mlp") return BackboneKind::Mlp;
    if (s == "conv") return BackboneKind::Conv;
    throw std::invalid_argument("config: unknown backbone `" + s + "`");
}

double parse_double(const std::string& key, const std::string& v) {
    std::size_t used = 0;
    double out = 0.0;
    try {
        out = std::stod(v, &used);
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad numeric value for " + key + ": `" + v + "`");
    }
    if (used != v.size())
        throw std::invalid_argument("config: bad numeric value for " + key + ": `" + v + "`");
    return out;
}

std::size_t parse_size(const std::string& key, const std::string& v) {
    const double d = parse_double(key, v);
    if (d < 0.0 || d != static_cast<double>(static_cast<std::size_t>(d)))
        throw std::invalid_argument("config: " + key + " must be a nonnegative integer");
    return static_cast<std::size_t>(d);
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const unsigned long long out = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument("junk");
        return out;
    } catch (const std::exception&) {
        throw std::invalid_argument("config: bad integer value for " + key + ": `" + v + "`");
    }
}

}  // namespace

std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream out;
    out << "# training\n";
    out << "B=" << cfg.train.B << "\n";
    out << "ratio_mu=" << cfg.train.ratio_mu << "\n";
    out << "tau_c=" << fmt_double(cfg.train.tau_c) << "\n";
    out << "tau_u=" << fmt_double(cfg.train.tau_u) << "\n";
    out << "lambda_u=" << fmt_double(cfg.train.lambda_u) << "\n";
    out << "beta=" << fmt_double(cfg.train.beta) << "\n";
    out << "T=" << cfg.train.T << "\n";
    out << "Q=" << cfg.train.Q << "\n";
    out << "ema_momentum=" << fmt_double(cfg.train.ema_momentum) << "\n";
    out << "lr0=" << fmt_double(cfg.train.lr0) << "\n";
    out << "momentum=" << fmt_double(cfg.train.momentum) << "\n";
    out << "weight_decay=" << fmt_double(cfg.train.weight_decay) << "\n";
    out << "total_steps=" << cfg.train.total_steps << "\n";
    out << "divergence=" << to_string(cfg.train.divergence) << "\n";
    out << "seed=" << cfg.train.seed << "\n";
    out << "# model\n";
    out << "backbone=" << backbone_to_string(cfg.model.backbone) << "\n";
    out << "feature_dim=" << cfg.model.feature_dim << "\n";
    out << "backbone_hidden=" << cfg.model.backbone_hidden << "\n";
    out << "hidden_dim=" << cfg.model.hidden_dim << "\n";
    out << "latent_dim=" << cfg.model.latent_dim << "\n";
    out << "# dataset\n";
    out << "dataset=" << cfg.data.dataset << "\n";
    out << "dataset_n=" << cfg.data.dataset_n << "\n";
    out << "dataset_noise=" << fmt_double(cfg.data.dataset_noise) << "\n";
    out << "dataset_classes=" << cfg.data.dataset_classes << "\n";
    out << "dataset_path=" << cfg.data.dataset_path << "\n";
    out << "idx_images=" << cfg.data.idx_images << "\n";
    out << "idx_labels=" << cfg.data.idx_labels << "\n";
    out << "unlabeled_list=" << cfg.data.unlabeled_list << "\n";
    out << "labels_per_class=" << cfg.data.labels_per_class << "\n";
    out << "test_fraction=" << fmt_double(cfg.data.test_fraction) << "\n";
    out << "eval_interval=" << cfg.eval_interval << "\n";
    return out.str();
}

void apply_config_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "B") cfg.train.B = parse_size(key, value);
    else if (key == "ratio_mu") cfg.train.ratio_mu = parse_size(key, value);
    else if (key == "tau_c") cfg.train.tau_c = parse_double(key, value);
    else if (key == "tau_u") cfg.train.tau_u = parse_double(key, value);
    else if (key == "lambda_u") cfg.train.lambda_u = parse_double(key, value);
    else if (key == "beta") cfg.train.beta = parse_double(key, value);
    else if (key == "T") cfg.train.T = parse_size(key, value);
    else if (key == "Q") cfg.train.Q = parse_size(key, value);
    else if (key == "ema_momentum") cfg.train.ema_momentum = parse_double(key, value);
    else if (key == "lr0") cfg.train.lr0 = parse_double(key, value);
    else if (key == "momentum") cfg.train.momentum = parse_double(key, value);
    else if (key == "weight_decay") cfg.train.weight_decay = parse_double(key, value);
    else if (key == "total_steps") cfg.train.total_steps = parse_size(key, value);
    else if (key == "divergence") cfg.train.divergence = divergence_form_from_string(value);
    else if (key == "seed") cfg.train.seed = parse_u64(key, value);
    else if (key == "backbone") cfg.model.backbone = backbone_from_string(value);
    else if (key == "feature_dim") cfg.model.feature_dim = parse_size(key, value);
    else if (key == "backbone_hidden") cfg.model.backbone_hidden = parse_size(key, value);
    else if (key == "hidden_dim") cfg.model.hidden_dim = parse_size(key, value);
    else if (key == "latent_dim") cfg.model.latent_dim = parse_size(key, value);
    else if (key == "dataset") cfg.data.dataset = value;
    else if (key == "dataset_n") cfg.data.dataset_n = parse_size(key, value);
    else if (key == "dataset_noise") cfg.data.dataset_noise = parse_double(key, value);
    else if (key == "dataset_classes") cfg.data.dataset_classes = parse_size(key, value);
    else if (key == "dataset_path") cfg.data.dataset_path = value;
    else if (key == "idx_images") cfg.data.idx_images = value;
    else if (key == "idx_labels") cfg.data.idx_labels = value;
    else if (key == "unlabeled_list") cfg.data.unlabeled_list = value;
    else if (key == "labels_per_class") cfg.data.labels_per_class = parse_size(key, value);
    else if (key == "test_fraction") cfg.data.test_fraction = parse_double(key, value);
    else if (key == "eval_interval") cfg.eval_interval = parse_size(key, value);
    else throw std::invalid_argument("config: unknown key `" + key + "`");
}

RunConfig parse_config(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        if (line[start] == '#' || line[start] == ';') continue;
        const std::size_t eq = line.find('=', start);
        if (eq == std::string::npos)
            throw std::invalid_argument("config line " + std::to_string(line_no) +
                                        ": expected key=value");
        std::string key = line.substr(start, eq - start);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::string value = line.substr(eq + 1);
        const std::size_t vstart = value.find_first_not_of(" \t");
        value = vstart == std::string::npos ? "" : value.substr(vstart);
        while (!value.empty() && (value.back() == ' ' || value.back() == '\t')) value.pop_back();
        apply_config_override(cfg, key, value);
    }
    if (cfg.eval_interval == 0) throw std::invalid_argument("config: eval_interval must be positive");
    if (!(cfg.train.tau_c > 0.0 && cfg.train.tau_c <= 1.0))
        throw std::invalid_argument("config: tau_c must lie in (0,1]");
    if (!(cfg.train.tau_u > 0.0)) throw std::invalid_argument("config: tau_u must be positive");
    if (cfg.train.T < 1) throw std::invalid_argument("config: T must be >= 1");
    return cfg;
}

RunConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

Dataset build_dataset(const RunConfig& cfg) {
    const auto& d = cfg.data;
    Dataset ds;
    if (d.dataset == "two-moons") {
        ds = make_two_moons(d.dataset_n, d.dataset_noise, cfg.train.seed);
    } else if (d.dataset == "blobs") {
        ds = make_blobs(d.dataset_n, d.dataset_classes, cfg.train.seed);
    } else if (d.dataset == "csv") {
        ds = load_csv(d.dataset_path);
    } else if (d.dataset == "idx") {
        ds = load_idx(d.idx_images, d.idx_labels, d.unlabeled_list);
    } else {
        throw std::invalid_argument("config: unknown dataset `" + d.dataset + "`");
    }
    split_ssl(ds, d.labels_per_class, d.test_fraction, cfg.train.seed);
    return ds;
}

}  // namespace npssl
