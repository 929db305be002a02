#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "drmm/drmm.hpp"

namespace drmm::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode { ok = 0, config_error = 1, data_error = 2, numeric_error = 3 };

// ---------------------------------------------------------------------------
// Experiment configuration

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed, const std::string& where) {
    if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : obj.items()) {
        if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <class T>
T value_or(const json& obj, const char* key, T fallback) {
    if (!obj.contains(key)) return fallback;
    try {
        return obj.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bad value for '") + key + "': " + e.what());
    }
}

struct DataPaths {
    fs::path train_images, train_labels, test_images, test_labels;
    std::size_t labeled = 0;      // N_L; 0 labels every training sample
    std::size_t limit_train = 0;  // 0 keeps all
    std::size_t limit_test = 0;
};

struct ForestConfig {
    std::size_t trees = 25;
    edrmm::TreeConfig tree;
    bool bootstrap = true;
};

struct ExperimentConfig {
    json raw;
    std::string kind = "drmm";
    Shape input_shape{28, 28, 1};
    std::size_t classes = 10;
    double noise_var = 1.0;
    std::vector<deep::LayerSpec> layers;
    learn::TrainConfig train;
    learn::HardEmConfig hard_em;
    ForestConfig forest;
    DataPaths data;
    fs::path out = "out";
    bool record_wall_time = true;
};

inline Padding parse_padding(const std::string& s) {
    if (s == "valid") return Padding::valid;
    if (s == "same") return Padding::same_zero;
    throw ConfigError("padding must be 'valid' or 'same', got '" + s + "'");
}

inline learn::Regime parse_regime(const std::string& s) {
    if (s == "supervised") return learn::Regime::supervised;
    if (s == "unsupervised") return learn::Regime::unsupervised;
    if (s == "semi_supervised") return learn::Regime::semi_supervised;
    throw ConfigError("regime must be supervised, unsupervised or semi_supervised, got '" + s + "'");
}

inline std::pair<std::size_t, std::size_t> pair_of(const json& obj, const char* key, std::size_t fallback) {
    if (!obj.contains(key)) return {fallback, fallback};
    const auto v = value_or<std::vector<std::size_t>>(obj, key, {});
    if (v.size() != 2) throw ConfigError(std::string("'") + key + "' must be a [height, width] pair");
    return {v[0], v[1]};
}

inline ExperimentConfig parse_config(const json& j, const fs::path& base) {
    ExperimentConfig c;
    c.raw = j;
    reject_unknown(j, {"model", "train", "hard_em", "forest", "data", "out", "record_wall_time"}, "config");
    auto resolve = [&](const json& obj, const char* key) -> fs::path {
        if (!obj.contains(key)) return {};
        const fs::path p = value_or<std::string>(obj, key, "");
        return fs::absolute(p.is_absolute() || base.empty() ? p : base / p).lexically_normal();
    };
    if (j.contains("model")) {
        const json& m = j["model"];
        reject_unknown(m, {"kind", "input_shape", "classes", "noise_var", "layers"}, "model");
        c.kind = value_or<std::string>(m, "kind", c.kind);
        if (c.kind != "rmm" && c.kind != "drmm" && c.kind != "drfm" && c.kind != "edrmm") {
            throw ConfigError("model kind must be rmm, drmm, drfm or edrmm, got '" + c.kind + "'");
        }
        c.input_shape = value_or<Shape>(m, "input_shape", c.input_shape);
        c.classes = value_or<std::size_t>(m, "classes", c.classes);
        c.noise_var = value_or<double>(m, "noise_var", c.noise_var);
        if (m.contains("layers")) {
            for (const json& l : m["layers"]) {
                reject_unknown(l, {"filters", "kernel", "stride", "padding", "pool", "pool_stride"}, "layer");
                deep::LayerSpec s;
                s.conv.filter_count = value_or<std::size_t>(l, "filters", 1);
                std::tie(s.conv.filter_height, s.conv.filter_width) = pair_of(l, "kernel", 1);
                s.conv.stride = value_or<std::size_t>(l, "stride", 1);
                s.conv.padding = parse_padding(value_or<std::string>(l, "padding", "valid"));
                std::tie(s.pool.window_height, s.pool.window_width) = pair_of(l, "pool", 2);
                s.pool.stride = value_or<std::size_t>(l, "pool_stride", std::max(s.pool.window_height, s.pool.window_width));
                c.layers.push_back(s);
            }
        }
    }
    if (j.contains("train")) {
        const json& t = j["train"];
        reject_unknown(t, {"regime", "step", "epochs", "batch_size", "labeled_batch", "steps_per_epoch", "learning_rate",
                           "lr_decay", "decay_every", "momentum", "beta_ce", "beta_rec", "beta_kl", "nonnegative",
                           "train_biases", "normalize_input", "ridge_scale", "seed"},
                       "train");
        auto& tc = c.train;
        tc.regime = parse_regime(value_or<std::string>(t, "regime", "supervised"));
        const auto step = value_or<std::string>(t, "step", "g_step");
        if (step != "g_step" && step != "m_step") throw ConfigError("step must be g_step or m_step");
        tc.step = step == "g_step" ? learn::StepKind::g_step : learn::StepKind::m_step;
        tc.epochs = value_or(t, "epochs", tc.epochs);
        tc.batch_size = value_or(t, "batch_size", tc.batch_size);
        tc.labeled_batch = value_or(t, "labeled_batch", tc.labeled_batch);
        tc.steps_per_epoch = value_or(t, "steps_per_epoch", tc.steps_per_epoch);
        tc.learning_rate = value_or(t, "learning_rate", tc.learning_rate);
        tc.lr_decay = value_or(t, "lr_decay", tc.lr_decay);
        tc.decay_every = value_or(t, "decay_every", tc.decay_every);
        tc.momentum = value_or(t, "momentum", tc.momentum);
        tc.beta_ce = value_or(t, "beta_ce", tc.beta_ce);
        tc.beta_rec = value_or(t, "beta_rec", tc.beta_rec);
        tc.beta_kl = value_or(t, "beta_kl", tc.beta_kl);
        tc.nonnegative = value_or(t, "nonnegative", tc.nonnegative);
        tc.train_biases = value_or(t, "train_biases", tc.train_biases);
        tc.normalize_input = value_or(t, "normalize_input", tc.normalize_input);
        tc.ridge_scale = value_or(t, "ridge_scale", tc.ridge_scale);
        tc.seed = value_or<std::uint64_t>(t, "seed", tc.seed);
    }
    if (j.contains("hard_em")) {
        const json& h = j["hard_em"];
        reject_unknown(h, {"nuisances", "iterations", "restarts", "ridge_scale"}, "hard_em");
        c.hard_em.num_nuisances = value_or(h, "nuisances", c.hard_em.num_nuisances);
        c.hard_em.iterations = value_or(h, "iterations", c.hard_em.iterations);
        c.hard_em.restarts = value_or(h, "restarts", c.hard_em.restarts);
        c.hard_em.ridge_scale = value_or(h, "ridge_scale", c.hard_em.ridge_scale);
    }
    if (j.contains("forest")) {
        const json& f = j["forest"];
        reject_unknown(f, {"trees", "depth", "branching", "iterations", "bootstrap"}, "forest");
        c.forest.trees = value_or(f, "trees", c.forest.trees);
        c.forest.tree.depth = value_or(f, "depth", c.forest.tree.depth);
        c.forest.tree.branching = value_or(f, "branching", c.forest.tree.branching);
        c.forest.tree.iterations = value_or(f, "iterations", c.forest.tree.iterations);
        c.forest.bootstrap = value_or(f, "bootstrap", c.forest.bootstrap);
    }
    if (j.contains("data")) {
        const json& d = j["data"];
        reject_unknown(d, {"train_images", "train_labels", "test_images", "test_labels", "labeled", "limit_train",
                           "limit_test"},
                       "data");
        c.data.train_images = resolve(d, "train_images");
        c.data.train_labels = resolve(d, "train_labels");
        c.data.test_images = resolve(d, "test_images");
        c.data.test_labels = resolve(d, "test_labels");
        c.data.labeled = value_or(d, "labeled", c.data.labeled);
        c.data.limit_train = value_or(d, "limit_train", c.data.limit_train);
        c.data.limit_test = value_or(d, "limit_test", c.data.limit_test);
        // Echo absolute paths so a checkpoint's config resolves from any directory.
        for (const char* key : {"train_images", "train_labels", "test_images", "test_labels"}) {
            if (d.contains(key)) c.raw["data"][key] = resolve(d, key).string();
        }
    }
    if (j.contains("out")) c.raw["out"] = (c.out = resolve(j, "out")).string();
    c.record_wall_time = value_or(j, "record_wall_time", c.record_wall_time);
    c.hard_em.num_classes = c.classes;
    c.hard_em.noise_var = c.noise_var;
    c.hard_em.seed = c.train.seed;
    c.forest.tree.seed = c.train.seed;
    if (c.kind == "drmm" && c.layers.empty()) throw ConfigError("a drmm model needs at least one layer");
    return c;
}

inline ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
    }
    return parse_config(j, path.parent_path());
}

inline void apply_seed(ExperimentConfig& c, std::uint64_t seed) {
    c.train.seed = c.hard_em.seed = c.forest.tree.seed = seed;
    c.raw["train"]["seed"] = seed;
}

// ---------------------------------------------------------------------------
// Data

inline Dataset truncate(const Dataset& d, std::size_t limit) {
    if (limit == 0 || limit >= d.size()) return d;
    std::vector<std::size_t> idx(limit);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    return subset(d, idx);
}

inline Dataset load_split(const fs::path& images, const fs::path& labels, std::size_t limit) {
    if (images.empty()) throw ConfigError("data paths are missing from the config");
    return truncate(io::load_idx(images, labels), limit);
}

inline std::string format_number(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string metrics_header() { return "epoch,train_error,test_error,cross_entropy,recon,kl,total,wall_seconds\n"; }

inline std::string metrics_row(const learn::EpochReport& r) {
    std::string s = std::to_string(r.epoch);
    for (double v : {r.train_error, r.test_error, r.cross_entropy, r.recon, r.kl, r.total, r.wall_seconds}) {
        s += "," + format_number(v);
    }
    return s + "\n";
}

inline std::pair<std::size_t, std::size_t> image_extent(const Shape& input) {
    if (input.size() >= 2) return {input[0], input[1]};
    const std::size_t d = shape_size(input);
    const auto side = static_cast<std::size_t>(std::llround(std::sqrt(static_cast<double>(d))));
    return side * side == d ? std::pair{side, side} : std::pair{std::size_t{1}, d};
}

inline Tensor flat_rows(const Dataset& d, bool normalize) {
    Tensor out({d.size(), d.image_size()});
    for (std::size_t n = 0; n < d.size(); ++n) {
        Tensor x = d.image_tensor(n, {d.image_size()});
        if (normalize) x = normalize_l2(x);
        std::copy_n(x.data(), x.size(), out.data() + n * x.size());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Subcommands

struct Options {
    fs::path config, checkpoint, out, images, labels;
    std::optional<std::uint64_t> seed;
    std::size_t count = 8;
    std::size_t cls = 0;
    std::string patch = "full";
};

inline fs::path out_dir(const Options& o, const ExperimentConfig* c) {
    if (!o.out.empty()) return o.out;
    return c ? c->out : fs::path("out");
}

inline ExperimentConfig config_from(const Options& o) {
    ExperimentConfig c = load_config(o.config);
    if (o.seed) apply_seed(c, *o.seed);
    return c;
}

/// Config echoed into a checkpoint, used when a later command omits --config.
inline ExperimentConfig config_for(const Options& o, const ckpt::Checkpoint& c) {
    if (!o.config.empty()) return config_from(o);
    if (!c.has(ckpt::meta_prefix + "config")) return ExperimentConfig{};
    return parse_config(json::parse(c.meta("config")), {});
}

inline int cmd_train(const Options& o) {
    ExperimentConfig c = config_from(o);
    const fs::path dir = out_dir(o, &c);
    fs::create_directories(dir);
    Dataset train = load_split(c.data.train_images, c.data.train_labels, c.data.limit_train);
    Dataset test;
    if (!c.data.test_images.empty()) test = load_split(c.data.test_images, c.data.test_labels, c.data.limit_test);
    std::ofstream metrics(dir / "metrics.csv", std::ios::binary);
    if (!metrics) throw DataError("cannot write " + (dir / "metrics.csv").string());
    metrics << metrics_header();
    ckpt::Checkpoint out;
    if (c.kind == "rmm") {
        const learn::HardEmResult r = learn::hard_em(flat_rows(train, c.train.normalize_input), c.hard_em);
        for (std::size_t i = 0; i < r.log_likelihood.size(); ++i) {
            learn::EpochReport rep;
            rep.epoch = i + 1;
            rep.train_error = rep.test_error = std::numeric_limits<double>::quiet_NaN();
            rep.total = -r.log_likelihood[i] / static_cast<double>(train.size());
            metrics << metrics_row(rep);
        }
        out = ckpt::to_checkpoint(r.params);
        out.set_meta("epoch", std::to_string(r.log_likelihood.size()));
    } else if (c.kind == "drmm") {
        deep::DrmmParams p = deep::make_drmm(c.input_shape, c.layers, c.classes, c.noise_var);
        Dataset labeled = train, unlabeled;
        std::string split = "all";
        if (c.data.labeled) {
            io::Split s = io::split_semisup(train, c.data.labeled, c.train.seed, c.classes);
            labeled = std::move(s.labeled);
            unlabeled = std::move(s.unlabeled);
            split = "class-balanced";
        }
        learn::initialize(p, labeled, c.train);
        const auto history = learn::train(p, labeled, unlabeled, test.size() ? &test : nullptr, c.train,
                                          [&](learn::EpochReport r) {
                                              if (!c.record_wall_time) r.wall_seconds = 0.0;
                                              metrics << metrics_row(r) << std::flush;
                                              std::cerr << "epoch " << r.epoch << " train_error " << r.train_error
                                                        << " test_error " << r.test_error << " total " << r.total << "\n";
                                          });
        out = ckpt::to_checkpoint(p);
        out.set_meta("epoch", std::to_string(history.size()));
        out.set_meta("split", split);
    } else {
        throw ConfigError("train supports model kinds rmm and drmm; use forest-train for edrmm");
    }
    out.set_meta("seed", std::to_string(c.train.seed));
    out.set_meta("config", c.raw.dump());
    ckpt::save(dir / "model.ckpt", out);
    return ok;
}

inline Dataset eval_data(const Options& o, const ExperimentConfig& c) {
    if (!o.images.empty()) return io::load_idx(o.images, o.labels);
    return load_split(c.data.test_images, c.data.test_labels, c.data.limit_test);
}

inline int cmd_eval(const Options& o) {
    const ckpt::Checkpoint ck = ckpt::load(o.checkpoint);
    const ExperimentConfig c = config_for(o, ck);
    const Dataset data = eval_data(o, c);
    const std::string k = ckpt::kind(ck);
    double err = 0.0;
    if (k == "drmm") {
        err = learn::error_rate(ckpt::drmm_from(ck), data, c.train);
    } else if (k == "discriminative") {
        err = relax::error_rate(ckpt::discriminative_from(ck), data, c.train.normalize_input);
    } else if (k == "edrmm") {
        err = edrmm::error_rate(ckpt::forest_from(ck), data);
    } else if (k == "rmm") {
        const auto nat = rmm::to_natural(ckpt::rmm_from(ck));
        std::size_t wrong = 0, total = 0;
        for (std::size_t n = 0; n < data.size(); ++n) {
            if (!data.labeled(n)) continue;
            ++total;
            Tensor x = data.image_tensor(n, {data.image_size()});
            if (c.train.normalize_input) x = normalize_l2(x);
            wrong += rmm::classify_relu(nat, x).c != static_cast<std::size_t>(data.labels[n]);
        }
        err = total ? static_cast<double>(wrong) / static_cast<double>(total) : 0.0;
    } else {
        throw FormatError("cannot evaluate a '" + k + "' checkpoint");
    }
    std::cout << "test_error " << format_number(err) << "\n";
    return ok;
}

inline int cmd_sample(const Options& o) {
    const ckpt::Checkpoint ck = ckpt::load(o.checkpoint);
    const fs::path dir = out_dir(o, nullptr);
    const std::uint64_t seed = o.seed.value_or(0);
    const std::string k = ckpt::kind(ck);
    for (std::size_t i = 0; i < o.count; ++i) {
        const std::uint64_t s = derive_seed(seed, "sample", i);
        Tensor image;
        std::size_t c = 0;
        Shape shape;
        if (k == "rmm") {
            const rmm::RmmParams p = ckpt::rmm_from(ck);
            const rmm::Sample smp = rmm::sample(p, s);
            image = smp.image;
            c = smp.latents.c;
            shape = {p.dim()};
        } else if (k == "drmm") {
            const deep::DrmmParams p = ckpt::drmm_from(ck);
            const deep::DeepSample smp = deep::sample(p, s);
            image = smp.image;
            c = smp.latents.c;
            shape = p.input_shape;
        } else if (k == "drfm") {
            const deep::DrfmParams p = ckpt::drfm_from(ck);
            const deep::DrfmSample smp = deep::drfm_sample(p, s);
            image = smp.image;
            c = smp.latents.c;
            shape = p.stack.input_shape;
        } else {
            throw FormatError("cannot sample from a '" + k + "' checkpoint");
        }
        const auto [h, w] = image_extent(shape);
        char name[64];
        std::snprintf(name, sizeof name, "sample_%04zu_class%zu.pgm", i, c);
        io::write_pgm(dir / name, image, h, w);
    }
    return ok;
}

inline actmax::PatchPartition parse_partition(const std::string& spec, std::size_t h, std::size_t w) {
    if (spec == "full") return actmax::PatchPartition::single(h * w);
    const auto x = spec.find('x');
    try {
        if (x != std::string::npos) return actmax::PatchPartition::tiles(h, w, std::stoul(spec.substr(0, x)), std::stoul(spec.substr(x + 1)));
    } catch (const std::logic_error&) {
    }
    throw ConfigError("patch spec must be 'full' or HxW tiles, got '" + spec + "'");
}

inline int cmd_actmax(const Options& o) {
    const ckpt::Checkpoint ck = ckpt::load(o.checkpoint);
    const rmm::RmmParams p = ckpt::rmm_from(ck);
    if (o.cls >= p.num_classes()) throw ConfigError("class " + std::to_string(o.cls) + " outside the model");
    const auto [h, w] = image_extent({p.dim()});
    const actmax::Result r = actmax::activity_max_closed(p.templates, o.cls, parse_partition(o.patch, h, w));
    const fs::path dir = out_dir(o, nullptr);
    io::write_pgm(dir / ("actmax_class" + std::to_string(o.cls) + ".pgm"), r.image, h, w);
    std::ofstream txt(dir / ("actmax_class" + std::to_string(o.cls) + ".txt"), std::ios::binary);
    for (std::size_t i = 0; i < r.image.size(); ++i) txt << (i ? " " : "") << format_number(r.image[i]);
    txt << "\ng";
    for (std::size_t g : r.g) txt << " " << g;
    txt << "\n";
    return ok;
}

inline int cmd_relax(const Options& o) {
    const ckpt::Checkpoint ck = ckpt::load(o.checkpoint);
    const std::string k = ckpt::kind(ck);
    relax::DiscriminativeParams d;
    if (k == "rmm") {
        d = relax::relax(ckpt::rmm_from(ck));
    } else if (k == "drmm") {
        d = relax::relax(ckpt::drmm_from(ck));
    } else {
        throw FormatError("cannot relax a '" + k + "' checkpoint");
    }
    ckpt::Checkpoint out = ckpt::to_checkpoint(d);
    for (const char* key : {"config", "seed", "epoch"}) {
        if (ck.has(ckpt::meta_prefix + key)) out.set_meta(key, ck.meta(key));
    }
    ckpt::save(out_dir(o, nullptr) / "relaxed.ckpt", out);
    return ok;
}

inline int cmd_forest_train(const Options& o) {
    const ExperimentConfig c = config_from(o);
    const fs::path dir = out_dir(o, &c);
    const Dataset train = load_split(c.data.train_images, c.data.train_labels, c.data.limit_train);
    const Dataset rows{flat_rows(train, c.train.normalize_input), train.labels};
    const edrmm::Forest f = edrmm::bagged_forest(rows, c.forest.trees, c.forest.tree, c.classes, c.train.seed,
                                                 c.forest.bootstrap);
    std::cout << "train_error " << format_number(edrmm::error_rate(f, rows)) << "\n";
    if (!c.data.test_images.empty()) {
        const Dataset test = load_split(c.data.test_images, c.data.test_labels, c.data.limit_test);
        std::cout << "test_error " << format_number(edrmm::error_rate(f, Dataset{flat_rows(test, c.train.normalize_input), test.labels}))
                  << "\n";
    }
    ckpt::Checkpoint out = ckpt::to_checkpoint(f);
    out.set_meta("seed", std::to_string(c.train.seed));
    out.set_meta("config", c.raw.dump());
    ckpt::save(dir / "forest.ckpt", out);
    return ok;
}

inline int cmd_forest_eval(const Options& o) {
    const ckpt::Checkpoint ck = ckpt::load(o.checkpoint);
    const ExperimentConfig c = config_for(o, ck);
    const Dataset data = eval_data(o, c);
    const edrmm::Forest f = ckpt::forest_from(ck);
    std::cout << "test_error " << format_number(edrmm::error_rate(f, Dataset{flat_rows(data, c.train.normalize_input), data.labels}))
              << "\n";
    return ok;
}

/// Parses arguments and dispatches; every failure becomes an exit code with
/// the message on standard error.
inline int run(int argc, const char* const* argv) {
    CLI::App app{"Deep Rendering Mixture Model toolkit"};
    app.require_subcommand(1);
    Options o;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "Experiment config (JSON)");
        sub->add_option("--checkpoint", o.checkpoint, "Model checkpoint");
        sub->add_option("--seed", o.seed, "Global seed");
        sub->add_option("--out", o.out, "Output directory");
    };
    CLI::App* train = app.add_subcommand("train", "Train a model and write model.ckpt and metrics.csv");
    CLI::App* eval = app.add_subcommand("eval", "Print the error of a checkpoint on a dataset");
    CLI::App* sample = app.add_subcommand("sample", "Draw images from a generative checkpoint");
    CLI::App* act = app.add_subcommand("actmax", "Class-appearance image of a shallow model");
    CLI::App* rel = app.add_subcommand("relax", "Write the discriminative relaxation of a checkpoint");
    CLI::App* ftrain = app.add_subcommand("forest-train", "Learn a bagged E-DRMM forest");
    CLI::App* feval = app.add_subcommand("forest-eval", "Print the error of a forest checkpoint");
    for (CLI::App* sub : {train, eval, sample, act, rel, ftrain, feval}) add_common(sub);
    for (CLI::App* sub : {eval, feval}) {
        sub->add_option("--images", o.images, "IDX images overriding the config's test set");
        sub->add_option("--labels", o.labels, "IDX labels for --images");
    }
    sample->add_option("-n,--count", o.count, "Number of samples");
    act->add_option("--class", o.cls, "Class to render");
    act->add_option("--patch", o.patch, "'full' or HxW tiles");
    train->get_option("--config")->required();
    ftrain->get_option("--config")->required();
    for (CLI::App* sub : {eval, sample, act, rel, feval}) sub->get_option("--checkpoint")->required();
    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return config_error;
    }
    try {
        if (train->parsed()) return cmd_train(o);
        if (eval->parsed()) return cmd_eval(o);
        if (sample->parsed()) return cmd_sample(o);
        if (act->parsed()) return cmd_actmax(o);
        if (rel->parsed()) return cmd_relax(o);
        if (ftrain->parsed()) return cmd_forest_train(o);
        return cmd_forest_eval(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config_error;
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << "\n";
        return numeric_error;
    } catch (const json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return config_error;
    } catch (const Error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return data_error;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return data_error;
    }
}

}  // namespace drmm::cli
