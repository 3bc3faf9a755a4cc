// embattr command-line front end: dataset generation, training, attribution
// maps, score curves and the experiment harnesses. Every run is seeded and
// emits CSV/PGM artifacts plus a manifest sufficient to reproduce it.

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "embattr/artifacts.hpp"
#include "embattr/experiments.hpp"
#include "embattr/models.hpp"
#include "embattr/scores.hpp"
#include "embattr/synthdigits.hpp"

namespace fs = std::filesystem;
using namespace embattr;

namespace {

struct CommonOpts {
    std::uint64_t seed = 0;
    std::string out_dir = "out";
    std::string data_dir;
    std::string checkpoint;
    std::string model = "constrained_ae";
    int bottleneck = 10;
};

void add_common(CLI::App* cmd, CommonOpts& o, bool needs_data, bool needs_checkpoint) {
    cmd->add_option("--seed", o.seed, "global seed (mandatory, no entropy default)")->required();
    cmd->add_option("--out", o.out_dir, "output directory")->envname("EMBATTR_OUT");
    if (needs_data)
        cmd->add_option("--data-dir", o.data_dir, "directory with idx files (mnist naming)")
            ->required();
    if (needs_checkpoint)
        cmd->add_option("--checkpoint", o.checkpoint, "trained checkpoint path")->required();
    cmd->add_option("--model", o.model, "drift_ae | constrained_ae | mnist_cnn");
    cmd->add_option("--bottleneck", o.bottleneck, "embedding size s");
}

void validate_paths(const CommonOpts& o, bool needs_data, bool needs_checkpoint) {
    if (needs_data && !mnist_present(o.data_dir))
        throw std::runtime_error("data dir '" + o.data_dir +
                                 "' is missing idx files (expected train-images-idx3-ubyte, "
                                 "train-labels-idx1-ubyte, t10k-images-idx3-ubyte, "
                                 "t10k-labels-idx1-ubyte)");
    if (needs_checkpoint && !fs::exists(o.checkpoint))
        throw std::runtime_error("checkpoint '" + o.checkpoint + "' not found");
    fs::create_directories(o.out_dir);
}

ModelRecipe recipe_of(const CommonOpts& o) {
    auto m = model_from_name(o.model);
    if (!m) throw std::runtime_error("unknown model '" + o.model + "'");
    return {*m, o.bottleneck, o.seed};
}

Network load_net(const CommonOpts& o) {
    Network net = build_model(recipe_of(o));
    net.load_checkpoint(o.checkpoint);
    return net;
}

SaliencyMethod parse_method(const std::string& s) {
    auto m = saliency_method_from_name(s);
    if (!m) throw std::runtime_error("unknown saliency method '" + s + "'");
    return *m;
}

Aggregator parse_agg(const std::string& s) {
    auto a = aggregator_from_name(s);
    if (!a) throw std::runtime_error("unknown aggregator '" + s + "'");
    return *a;
}

// probe flags are 1-based ("--probe 2" = second conv block)
int parse_probe(const Network& net, int probe1) {
    if (probe1 < 1 || probe1 > net.probe_count())
        throw std::runtime_error("probe " + std::to_string(probe1) + " out of range 1.." +
                                 std::to_string(net.probe_count()));
    return probe1 - 1;
}

using KV = std::vector<std::pair<std::string, std::string>>;

void finish_manifest(KV kv, const CommonOpts& o, const std::string& name,
                     const std::vector<std::string>& artifacts) {
    kv.emplace_back("seed", std::to_string(o.seed));
    if (!o.checkpoint.empty())
        kv.emplace_back("checkpoint_hash",
                        std::to_string(fnv1a_file(o.checkpoint)));
    for (const auto& a : artifacts)
        kv.emplace_back("artifact." + fs::path(a).filename().string(),
                        std::to_string(fnv1a_file(a)));
    write_manifest(kv, o.out_dir + "/" + name + ".manifest");
}

std::vector<Tensor> first_samples(const Dataset& d, int n) {
    std::vector<Tensor> xs;
    for (int i = 0; i < std::min(n, d.count); ++i) xs.push_back(d.image(i));
    return xs;
}

std::string fmt(double v) { return format_g17(v); }

// ---------------------------------------------------------------------------

int cmd_synth_data(const CommonOpts& o, int train_n, int test_n) {
    fs::create_directories(o.out_dir);
    Dataset train = synth_digits(train_n, o.seed);
    Dataset test = synth_digits(test_n, o.seed + 1);
    MnistPaths p = mnist_paths(o.out_dir);
    save_idx(train, p.train_images, p.train_labels);
    save_idx(test, p.test_images, p.test_labels);
    KV kv{{"command", "synth-data"},
          {"train_count", std::to_string(train_n)},
          {"test_count", std::to_string(test_n)}};
    finish_manifest(kv, o, "synth-data",
                    {p.train_images, p.train_labels, p.test_images, p.test_labels});
    std::cout << "wrote " << train_n << " train / " << test_n << " test digits to " << o.out_dir
              << "\n";
    return 0;
}

int cmd_train(const CommonOpts& o, int epochs, int batch, double lr, double lambda1,
              double lambda2, int period, int probe1, const std::string& method,
              const std::string& c_agg, const std::string& e_agg, bool constrained) {
    validate_paths(o, true, false);
    MnistPaths p = mnist_paths(o.data_dir);
    Dataset train = load_idx(p.train_images, p.train_labels);
    Dataset test = load_idx(p.test_images, p.test_labels);

    ModelRecipe recipe = recipe_of(o);
    Network net = build_model(recipe);
    TrainConfig cfg;
    cfg.epochs = epochs > 0 ? epochs : default_epochs(recipe);
    cfg.batch_size = batch;
    cfg.lr = lr;
    cfg.seed = o.seed;
    cfg.log_to_stderr = true;
    if (constrained) {
        if (recipe.name != ModelName::ConstrainedAe)
            throw std::runtime_error("constrained-train requires --model constrained_ae");
        ConstraintCfg cc;
        cc.lambda1 = lambda1;
        cc.lambda2 = lambda2;
        cc.period = period;
        cc.method = parse_method(method);
        cc.channel_agg = parse_agg(c_agg);
        cc.embedding_agg = parse_agg(e_agg);
        cc.probe = parse_probe(net, probe1);
        cc.validate();
        cfg.constraint = cc;
    }
    TrainResult res = train_model(net, train, test, cfg);

    const std::string ckpt = o.out_dir + "/" + o.model + ".ckpt";
    net.save_checkpoint(ckpt);
    CsvTable metrics;
    metrics.header = {"epoch", "split", "loss", "accuracy"};
    for (const auto& e : res.log) {
        metrics.add_row({std::to_string(e.epoch), "train", fmt(e.train_loss), ""});
        metrics.add_row({std::to_string(e.epoch), "test", "", fmt(e.test_accuracy)});
    }
    const std::string mcsv = o.out_dir + "/metrics.csv";
    write_csv(metrics, mcsv);

    KV kv{{"command", constrained ? "constrained-train" : "train"},
          {"model", o.model},
          {"bottleneck", std::to_string(o.bottleneck)},
          {"epochs", std::to_string(cfg.epochs)},
          {"batch", std::to_string(batch)},
          {"lr", fmt(lr)}};
    if (constrained) {
        kv.emplace_back("lambda1", fmt(lambda1));
        kv.emplace_back("lambda2", fmt(lambda2));
        kv.emplace_back("period", std::to_string(period));
        kv.emplace_back("probe", std::to_string(probe1));
    }
    std::string tmp_ckpt = o.checkpoint;  // none for train
    finish_manifest(kv, o, constrained ? "constrained-train" : "train", {ckpt, mcsv});
    if (net.has_classifier())
        std::cout << "final test accuracy: " << res.final_test_accuracy() << "\n";
    std::cout << "checkpoint: " << ckpt << "\n";
    return 0;
}

int cmd_attribute(const CommonOpts& o, const std::string& method, int probe1,
                  const std::string& c_agg, const std::string& e_agg, int sample) {
    validate_paths(o, true, true);
    MnistPaths p = mnist_paths(o.data_dir);
    Dataset test = load_idx(p.test_images, p.test_labels);
    if (sample < 0 || sample >= test.count)
        throw std::runtime_error("sample " + std::to_string(sample) + " out of range");
    Network net = load_net(o);
    const int probe = parse_probe(net, probe1);

    ScoreConfig cfg;
    cfg.method = parse_method(method);
    cfg.channel_agg = parse_agg(c_agg);
    cfg.embedding_agg = parse_agg(e_agg);
    cfg.seed = o.seed;

    Tensor x = test.image(sample);
    AttributionStack stack = attribute_batch(net, x, probe, cfg.method, {});
    Tensor raw = stack_to_raw_maps(stack, cfg.channel_agg, cfg.embedding_agg, test.rows, test.cols);
    Map2D raw_map = to_map(raw, 0);
    const double sp = sparsity(raw_map, cfg.embedding_agg == Aggregator::Mean);
    Map2D norm_map = normalize(raw_map);

    const std::string base = o.out_dir + "/attribution_s" + std::to_string(sample) + "_p" +
                             std::to_string(probe1) + "_" + saliency_method_name(cfg.method);
    write_pgm(norm_map, base + ".pgm");
    write_map_csv(norm_map, base + ".csv");

    KV kv{{"command", "attribute"},
          {"method", saliency_method_name(cfg.method)},
          {"C", aggregator_name(cfg.channel_agg)},
          {"E", aggregator_name(cfg.embedding_agg)},
          {"probe", std::to_string(probe1)},
          {"sample", std::to_string(sample)},
          {"sparsity", fmt(sp)}};
    finish_manifest(kv, o, "attribute", {base + ".pgm", base + ".csv"});
    std::cout << "sparsity: " << sp << "\n";
    return 0;
}

int cmd_noise_curve(const CommonOpts& o, const std::string& method, const std::string& c_agg,
                    const std::string& e_agg, int samples) {
    validate_paths(o, true, true);
    MnistPaths p = mnist_paths(o.data_dir);
    Dataset test = load_idx(p.test_images, p.test_labels);
    Network net = load_net(o);

    ScoreConfig cfg;
    cfg.method = parse_method(method);
    cfg.channel_agg = parse_agg(c_agg);
    cfg.embedding_agg = parse_agg(e_agg);
    cfg.seed = o.seed;
    cfg.samples = samples;
    ScoreCurve curve = score_curve(net, first_samples(test, samples), cfg);

    CsvTable t;
    t.header = {"probe",      "noise_mean", "noise_std", "benchmark_mean",
                "benchmark_std", "var_mean", "var_std",  "n_samples"};
    for (const auto& e : curve.entries)
        t.add_row({std::to_string(e.probe + 1), fmt(e.noise_mean), fmt(e.noise_std),
                   fmt(e.bench_mean), fmt(e.bench_std), fmt(e.var_mean), fmt(e.var_std),
                   std::to_string(curve.n_samples)});
    const std::string path = o.out_dir + "/noise_curve.csv";
    write_csv(t, path);
    KV kv{{"command", "noise-curve"},
          {"method", saliency_method_name(cfg.method)},
          {"C", aggregator_name(cfg.channel_agg)},
          {"E", aggregator_name(cfg.embedding_agg)},
          {"samples", std::to_string(samples)}};
    finish_manifest(kv, o, "noise-curve", {path});
    std::cout << "avg noise score: " << avg_noise_score(curve) << "\n";
    return 0;
}

int cmd_var_curve(const CommonOpts& o, const std::string& method, const std::string& c_agg,
                  double binarize_thr, int samples, std::uint64_t untrained_seed) {
    validate_paths(o, true, true);
    MnistPaths p = mnist_paths(o.data_dir);
    Dataset test = load_idx(p.test_images, p.test_labels);
    Network trained = load_net(o);
    ModelRecipe fresh = recipe_of(o);
    fresh.seed = untrained_seed;
    Network untrained = build_model(fresh);

    ScoreConfig cfg;
    cfg.method = parse_method(method);
    cfg.channel_agg = parse_agg(c_agg);
    cfg.seed = o.seed;
    cfg.samples = samples;
    if (binarize_thr > 0) {
        if (binarize_thr >= 1)
            throw std::runtime_error("binarize threshold must be in (0,1)");
        cfg.binarize = binarize_thr;
    }
    auto rows = run_variance_curves(trained, untrained, test, cfg);

    CsvTable t;
    t.header = {"probe", "var_trained", "var_untrained"};
    for (const auto& r : rows)
        t.add_row({std::to_string(r.probe + 1), fmt(r.trained), fmt(r.untrained)});
    const std::string path = o.out_dir + "/var_curve.csv";
    write_csv(t, path);
    KV kv{{"command", "var-curve"},
          {"method", saliency_method_name(cfg.method)},
          {"C", aggregator_name(cfg.channel_agg)},
          {"binarize", fmt(binarize_thr)},
          {"samples", std::to_string(samples)},
          {"untrained_seed", std::to_string(untrained_seed)}};
    finish_manifest(kv, o, "var-curve", {path});
    return 0;
}

int cmd_randomize_layers(const CommonOpts& o, const std::string& method, const std::string& c_agg,
                         const std::string& e_agg, int samples) {
    validate_paths(o, true, true);
    MnistPaths p = mnist_paths(o.data_dir);
    Dataset test = load_idx(p.test_images, p.test_labels);
    Network net = load_net(o);

    ScoreConfig cfg;
    cfg.method = parse_method(method);
    cfg.channel_agg = parse_agg(c_agg);
    cfg.embedding_agg = parse_agg(e_agg);
    cfg.seed = o.seed;
    cfg.samples = samples;
    RandomizationResult res = run_layer_randomization(net, test, cfg, o.seed, samples);

    CsvTable t;
    t.header = {"layer", "avg_noise_score", "accuracy"};
    for (const auto& r : res.rows) t.add_row({r.layer, fmt(r.avg_noise_score), fmt(r.accuracy)});
    const std::string path = o.out_dir + "/randomize_layers.csv";
    write_csv(t, path);
    KV kv{{"command", "randomize-layers"},
          {"samples", std::to_string(samples)},
          {"spearman", fmt(res.rho)}};
    finish_manifest(kv, o, "randomize-layers", {path});
    std::cout << "spearman(score, accuracy) = " << res.rho << "\n";
    return 0;
}

int cmd_drift(const CommonOpts& o, const std::string& lambda_grid, int samples, int probe1,
              bool no_clamp, const std::string& method, const std::string& c_agg,
              const std::string& e_agg) {
    validate_paths(o, true, true);
    MnistPaths p = mnist_paths(o.data_dir);
    Dataset test = load_idx(p.test_images, p.test_labels);
    Network net = load_net(o);

    DriftSpec spec;
    spec.lambda_grid.clear();
    std::stringstream ss(lambda_grid);
    std::string tok;
    while (std::getline(ss, tok, ',')) spec.lambda_grid.push_back(std::stod(tok));
    spec.samples = samples;
    spec.probe = parse_probe(net, probe1);
    spec.clamp01 = !no_clamp;
    spec.seed = o.seed;

    ScoreConfig cfg;
    cfg.method = parse_method(method);
    cfg.channel_agg = parse_agg(c_agg);
    cfg.embedding_agg = parse_agg(e_agg);
    cfg.seed = o.seed;
    DriftResult res = run_drift(net, test, spec, cfg);

    CsvTable t;
    t.header = {"lambda", "rel_noise_diff", "raw_noise_score"};
    for (const auto& r : res.rows)
        t.add_row({fmt(r.lambda), fmt(r.mean_rel_diff), fmt(r.mean_raw_score)});
    const std::string path = o.out_dir + "/drift.csv";
    write_csv(t, path);
    KV kv{{"command", "drift"},
          {"lambda_grid", lambda_grid},
          {"samples", std::to_string(samples)},
          {"probe", std::to_string(probe1)},
          {"clamp", no_clamp ? "0" : "1"},
          {"excluded", std::to_string(res.excluded)},
          {"spearman", fmt(res.rho)}};
    finish_manifest(kv, o, "drift", {path});
    std::cout << "spearman(rel diff, lambda) = " << res.rho << "\n";
    return 0;
}

int cmd_sparsity_study(const CommonOpts& o, const std::string& method, int samples) {
    validate_paths(o, true, true);
    MnistPaths p = mnist_paths(o.data_dir);
    Dataset test = load_idx(p.test_images, p.test_labels);
    Network net = load_net(o);

    std::vector<int> idx;
    for (int i = 0; i < std::min(samples, test.count); ++i) idx.push_back(i);
    Tensor xb = test.batch(idx);
    std::vector<int> probes(static_cast<std::size_t>(net.probe_count()));
    std::iota(probes.begin(), probes.end(), 0);
    SparsityResult res = sparsity_study(net, xb, probes, parse_method(method));

    CsvTable t;
    t.header = {"probe", "method", "C", "E", "sparsity"};
    for (const auto& r : res.rows)
        t.add_row({std::to_string(r.probe + 1), saliency_method_name(r.method),
                   aggregator_name(r.channel_agg), aggregator_name(r.embedding_agg),
                   fmt(r.sparsity)});
    const std::string path = o.out_dir + "/sparsity_study.csv";
    write_csv(t, path);
    KV kv{{"command", "sparsity-study"},
          {"method", method},
          {"samples", std::to_string(samples)},
          {"var_sparser_than_abs", res.var_sparser_than_abs ? "1" : "0"}};
    finish_manifest(kv, o, "sparsity-study", {path});
    std::cout << "var_sparser_than_abs: " << (res.var_sparser_than_abs ? "yes" : "no") << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"embedding attribution toolkit"};
    app.set_config("--config", "", "key=value config file (flags override)");
    app.require_subcommand(0, 1);

    CommonOpts o;
    int epochs = 0, batch = 64, samples = 50, period = 20, probe1 = 2, sample_idx = 0;
    int train_n = 60000, test_n = 10000;
    double lr = 1e-3, lambda1 = 0.0, lambda2 = 0.0, binarize_thr = 0.5;
    std::uint64_t untrained_seed = 1;
    std::string method = "actxgrad", c_agg = "abs", e_agg = "abs", lambda_grid =
        "0,0.05,0.1,0.2,0.3,0.5,0.75,1.0";
    bool no_clamp = false;

    auto* synth = app.add_subcommand("synth-data", "generate a procedural digit dataset (idx files)");
    add_common(synth, o, false, false);
    synth->add_option("--train-count", train_n, "training samples");
    synth->add_option("--test-count", test_n, "test samples");

    auto* train = app.add_subcommand("train", "train a model");
    add_common(train, o, true, false);
    train->add_option("--epochs", epochs, "0 = recipe default");
    train->add_option("--batch", batch, "mini-batch size");
    train->add_option("--lr", lr, "adam learning rate");

    auto* ctrain = app.add_subcommand("constrained-train", "train with score constraints");
    add_common(ctrain, o, true, false);
    ctrain->add_option("--epochs", epochs, "0 = recipe default");
    ctrain->add_option("--batch", batch, "mini-batch size");
    ctrain->add_option("--lr", lr, "adam learning rate");
    ctrain->add_option("--lambda1", lambda1, "noise-score weight");
    ctrain->add_option("--lambda2", lambda2, "variance-score weight");
    ctrain->add_option("--period", period, "apply scores every N mini-batches");
    ctrain->add_option("--probe", probe1, "probe (1-based conv block)");
    ctrain->add_option("--method", method, "vanilla | actxgrad | gradcam");
    ctrain->add_option("--C", c_agg, "channel aggregator: mean | abs | var");
    ctrain->add_option("--E", e_agg, "embedding aggregator: mean | abs | var");

    auto* attr = app.add_subcommand("attribute", "emit one attribution heatmap (pgm + csv)");
    add_common(attr, o, true, true);
    attr->add_option("--method", method, "vanilla | actxgrad | gradcam");
    attr->add_option("--probe", probe1, "probe (1-based conv block)");
    attr->add_option("--C", c_agg, "channel aggregator");
    attr->add_option("--E", e_agg, "embedding aggregator");
    attr->add_option("--sample", sample_idx, "test-set sample index");

    auto* ncurve = app.add_subcommand("noise-curve", "score curve over all probes");
    add_common(ncurve, o, true, true);
    ncurve->add_option("--method", method, "saliency method");
    ncurve->add_option("--C", c_agg, "channel aggregator");
    ncurve->add_option("--E", e_agg, "embedding aggregator");
    ncurve->add_option("--samples", samples, "sample count");

    auto* vcurve = app.add_subcommand("var-curve", "binarized variance curves, trained vs untrained");
    add_common(vcurve, o, true, true);
    vcurve->add_option("--method", method, "saliency method");
    vcurve->add_option("--C", c_agg, "channel aggregator");
    vcurve->add_option("--binarize", binarize_thr, "threshold in (0,1); 0 disables");
    vcurve->add_option("--samples", samples, "sample count");
    vcurve->add_option("--untrained-seed", untrained_seed, "seed for the untrained reference");

    auto* randl = app.add_subcommand("randomize-layers", "layer randomization study");
    add_common(randl, o, true, true);
    randl->add_option("--method", method, "saliency method");
    randl->add_option("--C", c_agg, "channel aggregator");
    randl->add_option("--E", e_agg, "embedding aggregator");
    randl->add_option("--samples", samples, "noise-curve samples per variant");

    auto* drift = app.add_subcommand("drift", "dataset drift detection");
    add_common(drift, o, true, true);
    drift->add_option("--lambda-grid", lambda_grid, "comma-separated shift amounts");
    drift->add_option("--samples", samples, "samples per lambda");
    drift->add_option("--probe", probe1, "probe (1-based conv block)");
    drift->add_flag("--no-clamp", no_clamp, "do not clamp shifted samples to [0,1]");
    drift->add_option("--method", method, "saliency method");
    drift->add_option("--C", c_agg, "channel aggregator");
    drift->add_option("--E", e_agg, "embedding aggregator");

    auto* sstudy = app.add_subcommand("sparsity-study", "per-probe per-scheme sparsity table");
    add_common(sstudy, o, true, true);
    sstudy->add_option("--method", method, "saliency method");
    sstudy->add_option("--samples", samples, "samples to average over");

    if (argc <= 1) {
        std::cout << app.help() << "\n";
        return 2;
    }
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        if (e.get_name() == "CallForHelp" || e.get_name() == "CallForAllHelp") {
            app.exit(e);
            return 0;
        }
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }

    try {
        if (synth->parsed()) return cmd_synth_data(o, train_n, test_n);
        if (train->parsed())
            return cmd_train(o, epochs, batch, lr, 0, 0, period, probe1, method, c_agg, e_agg,
                             false);
        if (ctrain->parsed())
            return cmd_train(o, epochs, batch, lr, lambda1, lambda2, period, probe1, method, c_agg,
                             e_agg, true);
        if (attr->parsed()) return cmd_attribute(o, method, probe1, c_agg, e_agg, sample_idx);
        if (ncurve->parsed()) return cmd_noise_curve(o, method, c_agg, e_agg, samples);
        if (vcurve->parsed())
            return cmd_var_curve(o, method, c_agg, binarize_thr, samples, untrained_seed);
        if (randl->parsed()) return cmd_randomize_layers(o, method, c_agg, e_agg, samples);
        if (drift->parsed())
            return cmd_drift(o, lambda_grid, samples, probe1, no_clamp, method, c_agg, e_agg);
        if (sstudy->parsed()) return cmd_sparsity_study(o, method, samples);
        std::cout << app.help() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
