#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "npssl/checkpoint.hpp"
#include "npssl/config.hpp"
#include "npssl/dataset.hpp"
#include "npssl/divergence.hpp"
#include "npssl/metrics.hpp"
#include "npssl/rng.hpp"
#include "npssl/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace npssl;

namespace {

json eval_point_json(const EvalPoint& pt) {
    return json{{"step", pt.step},
                {"lr", pt.lr},
                {"l_cls", pt.l_cls},
                {"l_u_cls", pt.l_u_cls},
                {"div", pt.div_term},
                {"total", pt.total},
                {"accuracy", pt.accuracy},
                {"uce", pt.uce},
                {"mean_uncertainty", pt.mean_uncertainty},
                {"pseudo_label_rate", pt.pseudo_label_rate}};
}

int run_training(const RunConfig& cfg, const std::string& resume_path, const std::string& out_dir) {
    fs::create_directories(out_dir);
    const Dataset ds = build_dataset(cfg);

    std::optional<TrainerState> resume;
    if (!resume_path.empty()) {
        LoadedCheckpoint loaded = load_checkpoint(resume_path);
        if (loaded.config != cfg)
            std::cerr << "warning: checkpoint config differs from --config; using --config\n";
        resume = std::move(loaded.state);
    }

    const std::string log_path = out_dir + "/metrics.jsonl";
    std::ofstream log(log_path, resume ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("cannot open " + log_path);

    TrainResult result = train(cfg, ds, std::move(resume), [&](const EvalPoint& pt) {
        log << eval_point_json(pt).dump() << "\n";
        log.flush();
        std::cout << "step " << pt.step << "  lr " << pt.lr << "  total " << pt.total
                  << "  accuracy " << pt.accuracy << "  uce " << pt.uce << "\n";
    });

    const std::string ckpt_path = out_dir + "/model.ckpt";
    save_checkpoint(ckpt_path, result.state, cfg);
    std::cout << "checkpoint written to " << ckpt_path << "\n";
    if (!result.log.empty()) std::cout << "final accuracy " << result.log.back().accuracy << "\n";
    return 0;
}

// SRC grammar: two-moons[:k=v,...] | blobs[:k=v,...] | csv:PATH | idx:IMAGES,LABELS[,UNLABELED]
Dataset dataset_from_source(const std::string& src) {
    const std::size_t colon = src.find(':');
    const std::string kind = src.substr(0, colon == std::string::npos ? src.size() : colon);
    const std::string rest = colon == std::string::npos ? "" : src.substr(colon + 1);

    if (kind == "csv") {
        if (rest.empty()) throw std::runtime_error("eval: csv source needs a path");
        return load_csv(rest);
    }
    if (kind == "idx") {
        std::vector<std::string> parts;
        std::stringstream ss(rest);
        std::string item;
        while (std::getline(ss, item, ',')) parts.push_back(item);
        if (parts.size() < 2) throw std::runtime_error("eval: idx source needs IMAGES,LABELS");
        return load_idx(parts[0], parts[1], parts.size() > 2 ? parts[2] : "");
    }
    if (kind != "two-moons" && kind != "blobs")
        throw std::runtime_error("eval: unknown data source `" + kind + "`");

    std::size_t n = 1000, classes = 4;
    double noise = 0.1;
    std::uint64_t seed = 1;
    std::stringstream ss(rest);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        const std::size_t eq = item.find('=');
        if (eq == std::string::npos) throw std::runtime_error("eval: bad option `" + item + "`");
        const std::string key = item.substr(0, eq), value = item.substr(eq + 1);
        if (key == "n") n = std::stoul(value);
        else if (key == "noise") noise = std::stod(value);
        else if (key == "classes") classes = std::stoul(value);
        else if (key == "seed") seed = std::stoull(value);
        else throw std::runtime_error("eval: unknown option `" + key + "`");
    }
    return kind == "two-moons" ? make_two_moons(n, noise, seed) : make_blobs(n, classes, seed);
}

int run_eval(const std::string& ckpt_path, const std::string& src) {
    LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
    Dataset ds = dataset_from_source(src);

    auto idx = ds.indices_of(Split::Test);
    if (idx.empty()) {
        for (std::size_t i = 0; i < ds.size(); ++i)
            if (ds.labels[i] != kUnlabeled) idx.push_back(i);
    }
    if (idx.empty()) throw std::runtime_error("eval: no labeled samples to score");

    const Tensor inputs = ds.gather(idx);
    const Tensor feats = backbone_forward(loaded.state.ema, loaded.state.shape, inputs);
    const auto preds = predict_inference(loaded.state.ema, loaded.state.shape,
                                         loaded.state.latent_bank, loaded.state.det_bank, feats,
                                         loaded.config.train.T, loaded.config.train.seed);
    std::vector<int> labels;
    for (std::size_t i : idx) labels.push_back(ds.labels[i]);

    const double acc = 1.0 - error_rate(preds, labels);
    const auto uce = expected_uce(preds, labels, 15);
    const auto ece = expected_ece(preds, labels, 15);
    json summary{{"samples", idx.size()}, {"accuracy", acc}, {"uce", uce.uce}, {"ece", ece.ece}};
    std::cout << summary.dump() << "\n";
    std::cout << "class,count,mean_uncertainty,accuracy\n";
    for (const auto& row : classwise_uncertainty(preds, labels))
        std::cout << row.label << "," << row.count << "," << row.mean_uncertainty << ","
                  << row.accuracy << "\n";
    return 0;
}

DiagonalGaussian parse_gaussian(const std::string& text) {
    const std::size_t comma = text.find(',');
    if (comma == std::string::npos)
        throw std::runtime_error("divergence: expected MEAN,VAR (use `;` between dimensions)");
    auto parse_vec = [](const std::string& s) {
        std::vector<double> out;
        std::stringstream ss(s);
        std::string item;
        while (std::getline(ss, item, ';'))
            if (!item.empty()) out.push_back(std::stod(item));
        return out;
    };
    return DiagonalGaussian(parse_vec(text.substr(0, comma)), parse_vec(text.substr(comma + 1)));
}

int run_divergence(const std::string& p_text, const std::string& q_text, double alpha,
                   std::size_t mc_samples, std::uint64_t seed, const std::string& file) {
    std::string ptxt = p_text, qtxt = q_text;
    if (!file.empty()) {
        std::ifstream in(file);
        if (!in) throw std::runtime_error("cannot open " + file);
        if (!std::getline(in, ptxt) || !std::getline(in, qtxt))
            throw std::runtime_error(file + ": expected two lines MEAN,VAR");
    }
    if (ptxt.empty() || qtxt.empty())
        throw std::runtime_error("divergence: provide --p and --q (or --file)");
    const DiagonalGaussian p = parse_gaussian(ptxt);
    const DiagonalGaussian q = parse_gaussian(qtxt);

    std::cout << "D=" << p.dim() << " alpha=" << alpha << "\n";
    std::cout << "kl(p||q)     = " << kl_diag(p, q) << "\n";
    std::cout << "js_skew      = " << js_skew(p, q, alpha) << "\n";
    std::cout << "js_skew_dual = " << js_skew_dual(p, q, alpha) << "\n";
    if (mc_samples > 0) {
        for (auto kind : {DivergenceKind::Kl, DivergenceKind::JsSkew, DivergenceKind::JsSkewDual}) {
            const McResult mc = mc_estimate(kind, p, q, alpha, mc_samples, seed);
            std::cout << "mc " << to_string(kind) << " = " << mc.estimate << " +/- " << mc.std_error
                      << "  (n=" << mc_samples << ", seed=" << seed << ")\n";
        }
    }
    return 0;
}

int run_bench(const std::string& ckpt_path, std::size_t t_max, std::size_t batch_size,
              std::size_t repeats, std::uint64_t seed) {
    LoadedCheckpoint loaded = load_checkpoint(ckpt_path);
    const ModelShape& shape = loaded.state.shape;

    Tensor batch;
    Rng rng(derive_seed(seed, 0x62656e63u));
    if (loaded.config.model.backbone == BackboneKind::Conv) {
        batch = Tensor({batch_size, 1, shape.image_h, shape.image_w});
    } else {
        batch = Tensor({batch_size, shape.input_dim});
    }
    for (auto& v : batch.data()) v = rng.uniform();

    const McDropoutBaseline baseline = init_baseline(shape, seed);
    std::vector<std::size_t> ts;
    for (std::size_t t = 1; t <= t_max; ++t) ts.push_back(t);
    const TimingTable table =
        timing_benchmark(loaded.state.params, shape, loaded.state.latent_bank,
                         loaded.state.det_bank, baseline, ts, batch, repeats, seed);

    std::cout << "T,np_seconds,baseline_seconds\n";
    for (std::size_t i = 0; i < ts.size(); ++i)
        std::cout << ts[i] << "," << table.np_mean(i) << "," << table.baseline_mean(i) << "\n";
    return 0;
}

int run_sweep(const RunConfig& base, const std::string& grid_path, const std::string& out_dir) {
    std::ifstream in(grid_path);
    if (!in) throw std::runtime_error("cannot open " + grid_path);
    std::vector<std::pair<std::string, std::vector<std::string>>> axes;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::runtime_error(grid_path + ":" + std::to_string(line_no) +
                                     ": expected key=v1,v2,...");
        std::vector<std::string> values;
        std::stringstream ss(line.substr(eq + 1));
        std::string item;
        while (std::getline(ss, item, ',')) values.push_back(item);
        if (values.empty())
            throw std::runtime_error(grid_path + ":" + std::to_string(line_no) + ": empty axis");
        axes.emplace_back(line.substr(0, eq), values);
    }
    if (axes.empty()) throw std::runtime_error(grid_path + ": empty grid");

    fs::create_directories(out_dir);
    std::size_t cells = 1;
    for (const auto& [_, values] : axes) cells *= values.size();

    for (std::size_t cell = 0; cell < cells; ++cell) {
        RunConfig cfg = base;
        std::string tag;
        std::size_t rem = cell;
        for (const auto& [key, values] : axes) {
            const std::string& value = values[rem % values.size()];
            rem /= values.size();
            apply_config_override(cfg, key, value);
            if (!tag.empty()) tag += "_";
            tag += key + "-" + value;
        }
        const Dataset ds = build_dataset(cfg);
        const std::string log_path = out_dir + "/sweep_" + tag + ".jsonl";
        std::ofstream log(log_path, std::ios::trunc);
        if (!log) throw std::runtime_error("cannot open " + log_path);
        TrainResult result = train(cfg, ds, std::nullopt, [&](const EvalPoint& pt) {
            log << eval_point_json(pt).dump() << "\n";
        });
        const double acc = result.log.empty() ? 0.0 : result.log.back().accuracy;
        std::cout << "cell " << tag << "  final accuracy " << acc << "  log " << log_path << "\n";
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"neural-process semi-supervised classifier"};
    app.require_subcommand(1);

    std::string config_path, resume_path, out_dir = "out";
    auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
    train_cmd->add_option("--config", config_path, "config file")->required();
    train_cmd->add_option("--resume", resume_path, "checkpoint to resume from");
    train_cmd->add_option("--out", out_dir, "output directory");

    std::string eval_ckpt, eval_src;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
    eval_cmd->add_option("--ckpt", eval_ckpt, "checkpoint file")->required();
    eval_cmd->add_option("--data", eval_src, "data source (two-moons[:opts] | blobs[:opts] | csv:PATH | idx:IMG,LAB)")
        ->required();

    std::string div_p, div_q, div_file;
    double div_alpha = 0.5;
    std::size_t div_mc = 0;
    std::uint64_t div_seed = 1;
    auto* div_cmd = app.add_subcommand("divergence", "closed-form divergences between two diagonal Gaussians");
    div_cmd->add_option("--p", div_p, "first Gaussian MEAN,VAR (`;` separates dimensions)");
    div_cmd->add_option("--q", div_q, "second Gaussian MEAN,VAR");
    div_cmd->add_option("--alpha", div_alpha, "skew weight in [0,1]");
    div_cmd->add_option("--mc", div_mc, "also run the Monte-Carlo oracle with this many samples");
    div_cmd->add_option("--seed", div_seed, "oracle seed");
    div_cmd->add_option("--file", div_file, "read the two Gaussians from a file (two MEAN,VAR lines)");

    std::string bench_ckpt;
    std::size_t bench_tmax = 10, bench_batch = 16, bench_repeats = 20;
    std::uint64_t bench_seed = 1;
    auto* bench_cmd = app.add_subcommand("bench", "uncertainty-estimation timing table");
    bench_cmd->add_option("--ckpt", bench_ckpt, "checkpoint file")->required();
    bench_cmd->add_option("--t-max", bench_tmax, "largest T");
    bench_cmd->add_option("--batch", bench_batch, "batch size");
    bench_cmd->add_option("--repeats", bench_repeats, "timing repeats");
    bench_cmd->add_option("--seed", bench_seed, "seed");

    std::string sweep_config, sweep_grid, sweep_out = "sweep";
    auto* sweep_cmd = app.add_subcommand("sweep", "grid of training runs, one metric log per cell");
    sweep_cmd->add_option("--config", sweep_config, "base config file")->required();
    sweep_cmd->add_option("--grid", sweep_grid, "grid file (key=v1,v2,... per line)")->required();
    sweep_cmd->add_option("--out", sweep_out, "output directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << e.what() << "\n\n" << app.help() << "\n";
        return 2;
    }

    try {
        if (train_cmd->parsed()) return run_training(load_config_file(config_path), resume_path, out_dir);
        if (eval_cmd->parsed()) return run_eval(eval_ckpt, eval_src);
        if (div_cmd->parsed())
            return run_divergence(div_p, div_q, div_alpha, div_mc, div_seed, div_file);
        if (bench_cmd->parsed())
            return run_bench(bench_ckpt, bench_tmax, bench_batch, bench_repeats, bench_seed);
        if (sweep_cmd->parsed())
            return run_sweep(load_config_file(sweep_config), sweep_grid, sweep_out);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
