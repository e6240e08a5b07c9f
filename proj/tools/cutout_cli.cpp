// cutout: command-line driver for preview, training, grid search, activation
// analysis and loader throughput measurements.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "cutout/cutout.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace cutout;

namespace {

constexpr const char* kVersion = "0.1.0";
constexpr int kExitOk = 0;
constexpr int kExitInput = 2;
constexpr int kExitNumeric = 3;

struct DataOptions {
    std::string dataset;
    std::vector<std::string> data;
    std::string labels;
    std::vector<std::string> test_data;
    std::string test_labels;
    std::size_t limit = 0;
    std::size_t synthetic_samples = 4000;
    std::size_t synthetic_side = 16;
};

struct AugmentOptions {
    std::size_t cutout_length = 0;
    std::string cutout_mode = "always_clipped";
    std::size_t pad = 0;
    bool flip = false;
};

struct Globals {
    std::uint64_t seed = 0;
    std::size_t workers = 1;
    std::string out_dir = ".";
    std::vector<std::string> argv;
};

void add_data_flags(CLI::App* cmd, DataOptions& d) {
    cmd->add_option("--dataset", d.dataset, "cifar10 | cifar100 | stl10 | raw | synthetic")
        ->required()
        ->check(CLI::IsMember({"cifar10", "cifar100", "stl10", "raw", "synthetic"}));
    cmd->add_option("--data", d.data, "training data file(s); several CIFAR batches are concatenated");
    cmd->add_option("--labels", d.labels, "STL-10 label file for --data");
    cmd->add_option("--test-data", d.test_data, "held-out data file(s); without them 10% of --data is held out");
    cmd->add_option("--test-labels", d.test_labels, "STL-10 label file for --test-data");
    cmd->add_option("--limit", d.limit, "use only the first N samples of each file set (0 = all)");
    cmd->add_option("--synthetic-samples", d.synthetic_samples, "size of the generated occlusion dataset");
    cmd->add_option("--synthetic-side", d.synthetic_side, "image side of the generated dataset");
}

void add_augment_flags(CLI::App* cmd, AugmentOptions& a) {
    cmd->add_option("--cutout-length", a.cutout_length, "cutout patch side in pixels (0 disables)")->capture_default_str();
    cmd->add_option("--cutout-mode", a.cutout_mode, "always_clipped | constrained_p50")
        ->check(CLI::IsMember({"always_clipped", "constrained_p50"}))
        ->capture_default_str();
    cmd->add_option("--pad", a.pad, "zero padding before the random crop (0 disables crop)")->capture_default_str();
    cmd->add_flag("--flip,!--no-flip", a.flip, "random horizontal mirroring");
}

Dataset read_dataset(const std::string& kind, const std::vector<std::string>& files, const std::string& labels) {
    if (files.empty()) throw ArgumentError("--data is required for dataset " + kind);
    if (kind == "stl10") {
        if (files.size() != 1 || labels.empty()) throw ArgumentError("stl10 needs one --data file and --labels");
        return parse_stl10(read_file(files[0]), read_file(labels));
    }
    std::vector<Dataset> parts;
    for (const auto& f : files) {
        const auto bytes = read_file(f);
        if (kind == "cifar10") parts.push_back(parse_cifar10(bytes));
        else if (kind == "cifar100") parts.push_back(parse_cifar100(bytes));
        else parts.push_back(parse_raw(bytes));
    }
    if (parts.size() == 1) return std::move(parts[0]);
    return concat(std::move(parts), kind);
}

struct Splits {
    Dataset train;
    Dataset eval;
    bool held_out = false;  // eval came from --test-data
};

/// Training data and the set used for evaluation: --test-data when given,
/// otherwise a seeded 10% validation split of the training data.
Splits load_splits(const DataOptions& d, std::uint64_t seed) {
    Dataset all, test;
    bool has_test = false;
    if (d.dataset == "synthetic") {
        SyntheticConfig sc;
        sc.samples = d.synthetic_samples;
        sc.side = d.synthetic_side;
        all = make_synthetic_occlusion(sc);
    } else {
        all = read_dataset(d.dataset, d.data, d.labels);
        if (!d.test_data.empty()) {
            test = read_dataset(d.dataset, d.test_data, d.test_labels);
            has_test = true;
        }
    }
    if (d.limit > 0) {
        all = take(all, d.limit);
        if (has_test) test = take(test, d.limit);
    }
    if (all.size() < 2) throw EmptyDatasetError("dataset has fewer than two samples");
    if (has_test) return {std::move(all), std::move(test), true};
    auto [train, val] = split_train_val(all, 0.1, seed);
    if (val.empty()) throw EmptyDatasetError("validation split is empty; use more samples");
    return {std::move(train), std::move(val), false};
}

fs::path prepare_out_dir(const Globals& g) {
    fs::path p(g.out_dir);
    fs::create_directories(p);
    return p;
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw FormatError("cannot write " + path.string());
    out << text;
}

json data_json(const DataOptions& d) {
    return {{"dataset", d.dataset},   {"data", d.data},   {"labels", d.labels},
            {"test_data", d.test_data}, {"test_labels", d.test_labels}, {"limit", d.limit},
            {"synthetic_samples", d.synthetic_samples}, {"synthetic_side", d.synthetic_side}};
}

json augment_json(const AugmentOptions& a) {
    return {{"cutout_length", a.cutout_length}, {"cutout_mode", a.cutout_mode}, {"pad", a.pad}, {"flip", a.flip}};
}

json train_json(const TrainConfig& c) {
    return {{"epochs", c.epochs},   {"batch_size", c.batch_size},     {"lr0", c.lr0},
            {"milestones", c.milestones}, {"factor", c.factor}, {"momentum", c.momentum},
            {"nesterov", c.nesterov}, {"weight_decay", c.weight_decay}, {"seed", c.seed}};
}

json arch_json(const ArchDescriptor& a) {
    return {{"in_channels", a.in_channels}, {"in_height", a.in_height},   {"in_width", a.in_width},
            {"conv1_channels", a.conv1_channels}, {"conv2_channels", a.conv2_channels},
            {"class_count", a.class_count}, {"kernel", a.kernel},         {"dropout_p", a.dropout_p}};
}

void write_manifest(const fs::path& dir, const std::string& command, const Globals& g, json config,
                    const std::vector<std::string>& outputs) {
    json m{{"tool", "cutout"},
           {"version", kVersion},
           {"command", command},
           {"argv", g.argv},
           {"seeds", {{"global", g.seed}}},
           {"workers", g.workers},
           {"config", std::move(config)},
           {"outputs", outputs}};
    write_text(dir / "manifest.json", m.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Training flags shared by train and gridsearch
// ---------------------------------------------------------------------------

struct TrainFlags {
    std::string preset = "cifar";
    std::size_t epochs = 0;
    std::size_t batch_size = 0;
    double lr0 = 0;
    std::vector<std::size_t> milestones;
    double factor = 0;
    double momentum = 0;
    bool nesterov = true;
    double weight_decay = 0;
    float dropout = 0.3f;
    std::uint32_t conv1 = 32;
    std::uint32_t conv2 = 64;

    CLI::Option *o_epochs{}, *o_batch{}, *o_lr0{}, *o_milestones{}, *o_factor{}, *o_momentum{}, *o_nesterov{},
        *o_wd{};

    void add(CLI::App* cmd) {
        cmd->add_option("--preset", preset, "base recipe: cifar | svhn | stl10")
            ->check(CLI::IsMember({"cifar", "svhn", "stl10"}))
            ->capture_default_str();
        o_epochs = cmd->add_option("--epochs", epochs, "training epochs");
        o_batch = cmd->add_option("--batch-size", batch_size, "minibatch size");
        o_lr0 = cmd->add_option("--lr0", lr0, "initial learning rate");
        o_milestones = cmd->add_option("--milestones", milestones, "epochs at which the rate is divided")
                           ->delimiter(',')
                           ->expected(0, -1);
        o_factor = cmd->add_option("--factor", factor, "learning rate divisor at each milestone");
        o_momentum = cmd->add_option("--momentum", momentum, "momentum coefficient");
        o_nesterov = cmd->add_flag("--nesterov,!--no-nesterov", nesterov, "Nesterov momentum");
        o_wd = cmd->add_option("--weight-decay", weight_decay, "L2 penalty on weights");
        cmd->add_option("--dropout", dropout, "dropout probability before the dense layer")->capture_default_str();
        cmd->add_option("--conv1", conv1, "channels of the first convolution")->capture_default_str();
        cmd->add_option("--conv2", conv2, "channels of the second convolution")->capture_default_str();
    }

    TrainConfig resolve(std::uint64_t seed) const {
        TrainConfig c = preset == "svhn" ? TrainConfig::svhn() : preset == "stl10" ? TrainConfig::stl10() : TrainConfig::cifar();
        if (o_epochs->count()) c.epochs = epochs;
        if (o_batch->count()) c.batch_size = batch_size;
        if (o_lr0->count()) c.lr0 = lr0;
        if (o_milestones->count()) c.milestones = milestones;
        if (o_factor->count()) c.factor = factor;
        if (o_momentum->count()) c.momentum = momentum;
        if (o_nesterov->count()) c.nesterov = nesterov;
        if (o_wd->count()) c.weight_decay = weight_decay;
        c.seed = seed;
        c.validate();
        return c;
    }

    ArchDescriptor arch(const Dataset& ds) const {
        ArchDescriptor a;
        const Shape3 s = ds.shape();
        a.in_channels = static_cast<std::uint32_t>(s.channels);
        a.in_height = static_cast<std::uint32_t>(s.height);
        a.in_width = static_cast<std::uint32_t>(s.width);
        a.class_count = static_cast<std::uint32_t>(ds.class_count);
        a.conv1_channels = conv1;
        a.conv2_channels = conv2;
        a.dropout_p = dropout;
        return a;
    }
};

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_preview(const Globals& g, const DataOptions& d, const AugmentOptions& a, std::size_t count) {
    Splits s = load_splits(d, g.seed);
    const DatasetStats stats = compute_stats(s.train);
    const TransformChain chain =
        standard_chain(stats, s.train.shape(), a.pad, a.flip, {a.cutout_length, parse_cutout_mode(a.cutout_mode)});
    const fs::path dir = prepare_out_dir(g);
    std::vector<std::string> outputs;
    const std::size_t n = std::min(count, s.train.size());
    for (std::size_t i = 0; i < n; ++i) {
        const auto& sample = s.train.samples[i];
        const LabeledSample aug = apply_chain(sample, chain, 0, i, g.seed);
        const std::string orig_name = "sample_" + std::to_string(i) + "_original.ppm";
        const std::string aug_name = "sample_" + std::to_string(i) + "_augmented.ppm";
        write_file(dir / orig_name, encode_ppm(sample.image));
        write_file(dir / aug_name, encode_ppm(aug.image, &stats));
        outputs.push_back(orig_name);
        outputs.push_back(aug_name);
    }
    write_manifest(dir, "preview", g,
                   {{"data", data_json(d)}, {"augment", augment_json(a)}, {"count", count}, {"chain", chain.describe()}},
                   outputs);
    std::cout << "wrote " << outputs.size() << " images to " << dir.string() << "\n";
    return kExitOk;
}

int cmd_train(const Globals& g, const DataOptions& d, const AugmentOptions& a, const TrainFlags& tf) {
    const TrainConfig cfg = tf.resolve(g.seed);
    Splits s = load_splits(d, g.seed);
    const DatasetStats stats = compute_stats(s.train);
    const TransformChain chain =
        standard_chain(stats, s.train.shape(), a.pad, a.flip, {a.cutout_length, parse_cutout_mode(a.cutout_mode)});
    const ArchDescriptor arch = tf.arch(s.train);
    auto net = make_small_cnn<float>(arch, cfg.seed);

    const fs::path dir = prepare_out_dir(g);
    const json config{{"data", data_json(d)},        {"augment", augment_json(a)}, {"train", train_json(cfg)},
                      {"arch", arch_json(arch)},     {"chain", chain.describe()},  {"eval_set", s.held_out ? "test" : "validation"},
                      {"train_samples", s.train.size()}, {"eval_samples", s.eval.size()}};
    const std::vector<std::string> outputs{"report.csv", "checkpoint.bin"};
    write_manifest(dir, "train", g, config, outputs);

    // The report is appended per epoch so a diverged run keeps its history.
    std::ofstream csv(dir / "report.csv", std::ios::binary);
    csv << TrainReport::csv_header << "\n" << std::flush;
    TrainOptions opts{g.workers, 4, [&](const EpochRecord& r) {
                          csv << TrainReport::csv_row(r) << "\n" << std::flush;
                          std::cout << "epoch " << r.epoch << " lr " << r.lr << " loss " << r.train_loss << " train_acc "
                                    << r.train_acc << " eval_acc " << r.eval_acc << "\n";
                      }};
    try {
        train(net, s.train, chain, cfg, s.eval, opts);
    } catch (const NumericError& e) {
        std::cerr << "error: training diverged: " << e.what() << "\n";
        return kExitNumeric;
    }
    write_file(dir / "checkpoint.bin", save_checkpoint(net));
    return kExitOk;
}

int cmd_gridsearch(const Globals& g, const DataOptions& d, const AugmentOptions& a, const TrainFlags& tf,
                   const std::vector<std::size_t>& lengths, std::size_t runs, std::size_t threads) {
    const TrainConfig cfg = tf.resolve(g.seed);
    Dataset all;
    if (d.dataset == "synthetic") {
        SyntheticConfig sc;
        sc.samples = d.synthetic_samples;
        sc.side = d.synthetic_side;
        all = make_synthetic_occlusion(sc);
    } else {
        all = read_dataset(d.dataset, d.data, d.labels);
    }
    if (d.limit > 0) all = take(all, d.limit);
    const ChainRecipe recipe{a.pad, a.flip, parse_cutout_mode(a.cutout_mode)};
    const ArchDescriptor arch = tf.arch(all);
    const fs::path dir = prepare_out_dir(g);
    const std::vector<std::string> outputs{"gridsearch_runs.csv", "gridsearch_summary.csv"};
    write_manifest(dir, "gridsearch", g,
                   {{"data", data_json(d)},
                    {"augment", augment_json(a)},
                    {"train", train_json(cfg)},
                    {"arch", arch_json(arch)},
                    {"lengths", lengths},
                    {"runs", runs},
                    {"threads", threads},
                    {"val_fraction", 0.1}},
                   outputs);
    GridSearchReport report = run_grid(all, lengths, runs, recipe, cfg, arch, GridOptions{threads, g.workers, 0.1});
    write_text(dir / "gridsearch_runs.csv", report.runs_csv());
    write_text(dir / "gridsearch_summary.csv", report.summary_csv());
    std::cout << report.summary_csv();
    if (!report.has_selection) {
        std::cerr << "error: every run diverged\n";
        return kExitNumeric;
    }
    std::cout << "selected_length " << report.selected_length << "\n";
    return kExitOk;
}

int cmd_analyze(const Globals& g, const DataOptions& d, const std::string& baseline_path,
                const std::string& candidate_path, std::vector<std::string> layers) {
    for (const auto& p : {baseline_path, candidate_path})
        if (!fs::is_regular_file(p)) throw FormatError("checkpoint not found: " + p);
    const SmallCnn<float> base = load_checkpoint<float>(read_file(baseline_path));
    const SmallCnn<float> cand = load_checkpoint<float>(read_file(candidate_path));
    if (base.arch().input_shape() != cand.arch().input_shape() || base.arch().conv1_channels != cand.arch().conv1_channels ||
        base.arch().conv2_channels != cand.arch().conv2_channels || base.arch().class_count != cand.arch().class_count)
        throw ArgumentError("checkpoints have different architectures");
    Splits s = load_splits(d, g.seed);
    if (s.eval.shape() != base.input_shape()) throw ShapeError("dataset shape does not match the checkpoints");
    const TransformChain chain = standard_chain(compute_stats(s.train), s.train.shape(), 0, false, {0});
    if (layers.empty()) layers = profile_layers(base);

    const fs::path dir = prepare_out_dir(g);
    std::vector<std::string> outputs;
    json comparisons = json::array();
    for (const auto& layer : layers) {
        const ActivationProfile pa = profile_dataset(base, s.eval, layer, chain, g.workers);
        const ActivationProfile pb = profile_dataset(cand, s.eval, layer, chain, g.workers);
        write_text(dir / ("profile_baseline_" + layer + ".csv"), pa.to_csv());
        write_text(dir / ("profile_candidate_" + layer + ".csv"), pb.to_csv());
        outputs.push_back("profile_baseline_" + layer + ".csv");
        outputs.push_back("profile_candidate_" + layer + ".csv");
        const ProfileComparison c = compare_profiles(pa, pb);
        comparisons.push_back(json::parse(c.to_json()));
        std::cout << c.to_json() << "\n";
    }
    write_text(dir / "comparison.json", comparisons.dump(2) + "\n");
    outputs.push_back("comparison.json");
    write_manifest(dir, "analyze", g,
                   {{"data", data_json(d)},
                    {"baseline", baseline_path},
                    {"candidate", candidate_path},
                    {"layers", layers},
                    {"eval_samples", s.eval.size()}},
                   outputs);
    return kExitOk;
}

int cmd_throughput(const Globals& g, const DataOptions& d, const AugmentOptions& a, std::size_t batch_size,
                   std::size_t queue_capacity) {
    Splits s = load_splits(d, g.seed);
    const DatasetStats stats = compute_stats(s.train);
    const TransformChain chain =
        standard_chain(stats, s.train.shape(), a.pad, a.flip, {a.cutout_length, parse_cutout_mode(a.cutout_mode)});
    LoaderConfig cfg{batch_size, g.seed, g.workers, queue_capacity, false};
    cfg.validate();
    const ThroughputReport r = throughput_probe(s.train, chain, cfg);
    const fs::path dir = prepare_out_dir(g);
    write_text(dir / "throughput.json", r.to_json() + "\n");
    write_manifest(dir, "throughput", g,
                   {{"data", data_json(d)},
                    {"augment", augment_json(a)},
                    {"chain", chain.describe()},
                    {"batch_size", batch_size},
                    {"queue_capacity", queue_capacity},
                    {"hardware_threads", std::thread::hardware_concurrency()}},
                   {"throughput.json"});
    std::cout << r.to_json() << "\n";
    return kExitOk;
}

/// Command line stored in a manifest, with --out-dir replaced when the
/// caller supplied one.
std::vector<std::string> manifest_argv(const std::string& path, const std::string& out_dir) {
    std::ifstream in(path);
    if (!in) throw FormatError("cannot open manifest " + path);
    json m;
    try {
        m = json::parse(in);
    } catch (const json::exception& e) {
        throw FormatError("manifest " + path + ": " + e.what());
    }
    if (!m.contains("argv") || !m["argv"].is_array()) throw FormatError("manifest " + path + " has no argv");
    std::vector<std::string> args = m["argv"].get<std::vector<std::string>>();
    if (!out_dir.empty()) {
        std::vector<std::string> out{args.empty() ? "cutout" : args[0], "--out-dir", out_dir};
        for (std::size_t i = 1; i < args.size(); ++i) {
            if (args[i] == "--out-dir" && i + 1 < args.size()) {
                ++i;
                continue;
            }
            if (args[i].rfind("--out-dir=", 0) == 0) continue;
            out.push_back(args[i]);
        }
        args = std::move(out);
    }
    return args;
}

int run(std::vector<std::string> args) {
    CLI::App app{"Cutout augmentation toolkit: preview, train, gridsearch, analyze, throughput"};
    app.require_subcommand(0, 1);
    Globals g;
    std::string from_manifest;
    app.add_option("--seed", g.seed, "global seed (shuffles, augmentation, init, splits)")->capture_default_str();
    app.add_option("--workers", g.workers, "data loading / analysis worker threads")->capture_default_str();
    app.add_option("--out-dir", g.out_dir, "directory for all outputs")->capture_default_str();
    app.add_option("--from-manifest", from_manifest, "re-run the command recorded in a manifest.json");
    app.add_flag_callback("--version", [] { throw CLI::Success(); }, "print the version");
    app.fallthrough();

    DataOptions data;
    AugmentOptions aug;
    TrainFlags train_flags, grid_flags;

    auto* preview = app.add_subcommand("preview", "write original/augmented sample pairs as PPM");
    std::size_t count = 8;
    add_data_flags(preview, data);
    add_augment_flags(preview, aug);
    preview->add_option("--count", count, "number of samples")->capture_default_str();

    AugmentOptions train_aug{0, "always_clipped", 4, true};
    auto* train_cmd = app.add_subcommand("train", "train the small CNN; writes report.csv and checkpoint.bin");
    add_data_flags(train_cmd, data);
    add_augment_flags(train_cmd, train_aug);
    train_flags.add(train_cmd);

    AugmentOptions grid_aug{0, "always_clipped", 4, true};
    std::vector<std::size_t> lengths{0, 4, 8, 12, 16};
    std::size_t runs = 5, threads = 1;
    auto* grid = app.add_subcommand("gridsearch", "sweep the cutout length on a 90/10 split");
    add_data_flags(grid, data);
    add_augment_flags(grid, grid_aug);
    grid_flags.add(grid);
    grid->add_option("--lengths", lengths, "patch lengths to evaluate")->delimiter(',')->capture_default_str();
    grid->add_option("--runs", runs, "runs per length")->capture_default_str();
    grid->add_option("--threads", threads, "grid cells trained concurrently")->capture_default_str();

    std::string baseline, candidate;
    std::vector<std::string> layers;
    auto* analyze = app.add_subcommand("analyze", "compare activation-magnitude profiles of two checkpoints");
    add_data_flags(analyze, data);
    analyze->add_option("--baseline", baseline, "reference checkpoint")->required();
    analyze->add_option("--candidate", candidate, "checkpoint compared against the reference")->required();
    analyze->add_option("--layers", layers, "layers to profile (default: every relu and logits)")->delimiter(',');

    AugmentOptions tp_aug{16, "always_clipped", 4, true};
    std::size_t tp_batch = 128, tp_queue = 4;
    auto* throughput = app.add_subcommand("throughput", "measure loader speed at 1 and --workers workers");
    add_data_flags(throughput, data);
    add_augment_flags(throughput, tp_aug);
    throughput->add_option("--batch-size", tp_batch, "batch size")->capture_default_str();
    throughput->add_option("--queue-capacity", tp_queue, "prepared batches allowed in flight")->capture_default_str();

    std::vector<std::string> reversed(args.rbegin(), args.rend() - 1);
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::Success&) {
        std::cout << "cutout " << kVersion << "\n";
        return kExitOk;
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n";
        CLI::App* sub = app.get_subcommands().empty() ? &app : app.get_subcommands().front();
        std::cerr << sub->help();
        return kExitInput;
    }

    if (!from_manifest.empty()) {
        const auto* od = app.get_option("--out-dir");
        return run(manifest_argv(from_manifest, od->count() ? g.out_dir : std::string{}));
    }
    g.argv = args;

    if (preview->parsed()) return cmd_preview(g, data, aug, count);
    if (train_cmd->parsed()) return cmd_train(g, data, train_aug, train_flags);
    if (grid->parsed()) return cmd_gridsearch(g, data, grid_aug, grid_flags, lengths, runs, threads);
    if (analyze->parsed()) return cmd_analyze(g, data, baseline, candidate, layers);
    if (throughput->parsed()) return cmd_throughput(g, data, tp_aug, tp_batch, tp_queue);
    std::cerr << app.help();
    return kExitInput;
}

}  // namespace

int main(int argc, char** argv) {
    configure_allocator();
    std::vector<std::string> args(argv, argv + argc);
    try {
        return run(std::move(args));
    } catch (const NumericError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitInput;
    }
}
