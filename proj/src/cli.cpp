#include "gdfd/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "gdfd/distill.hpp"

namespace fs = std::filesystem;

namespace gdfd {

namespace {

// fixed seed streams so every run component gets an independent generator
// while one --seed value pins the whole pipeline
constexpr std::uint64_t kTeacherInit = 1;
constexpr std::uint64_t kTeacherShuffle = 2;
constexpr std::uint64_t kGenTrain = 3;
constexpr std::uint64_t kStudentInit = 4;
constexpr std::uint64_t kSourceSeed = 5;
constexpr std::uint64_t kSynthSeed = 6;
constexpr std::uint64_t kSampleSeed = 7;

struct CommonOpts {
    std::string config_path;
    std::string out;
    std::string seed;
    std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "key=value config file");
    cmd->add_option("--set", o.sets, "override one config key (key=value, repeatable)");
    cmd->add_option("--seed", o.seed, "run seed (overrides the config)");
    cmd->add_option("--out", o.out, "output directory")->required();
}

RunConfig resolve(const CommonOpts& o) {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const std::string& s : o.sets) {
        const std::size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError("--set needs key=value, got '" + s + "'");
        overrides.emplace_back(s.substr(0, eq), s.substr(eq + 1));
    }
    if (!o.seed.empty()) overrides.emplace_back("seed", o.seed);
    if (o.config_path.empty()) return parse_config("", overrides);
    return load_config(o.config_path, overrides);
}

std::string fmt17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f << text;
}

void write_manifest(const std::string& out_dir, const std::string& command, const RunConfig& cfg,
                    const std::vector<std::string>& artifacts) {
    nlohmann::ordered_json j;
    j["command"] = command;
    j["seed"] = cfg.seed;
    nlohmann::ordered_json c;
    for (const auto& [k, v] : config_items(cfg)) c[k] = v;
    j["config"] = c;
    j["artifacts"] = artifacts;
    write_text(out_dir + "/run.json", j.dump(2) + "\n");
}

std::pair<Dataset, Dataset> make_data(const RunConfig& cfg) {
    return gen_toy_dataset(cfg.seed, static_cast<std::size_t>(cfg.train_count),
                           static_cast<std::size_t>(cfg.test_count), cfg.classes, cfg.image_size,
                           cfg.channels);
}

ClassifierConfig teacher_arch(const RunConfig& cfg) {
    ClassifierConfig c;
    c.width = cfg.teacher_width;
    c.class_count = cfg.classes;
    c.input_size = cfg.image_size;
    c.in_channels = cfg.channels;
    return c;
}

ClassifierConfig student_arch(const RunConfig& cfg) {
    ClassifierConfig c = teacher_arch(cfg);
    c.width = cfg.student_width;
    return c;
}

GeneratorConfig gen_arch(const RunConfig& cfg) {
    GeneratorConfig a;
    a.latent_dim = cfg.latent_dim;
    a.base_size = cfg.gen_base_size;
    a.base_channels = cfg.gen_base_channels;
    return a;
}

LossWeights<float> weights_of(const RunConfig& cfg) {
    LossWeights<float> w;
    w.lambda_t = static_cast<float>(cfg.lambda_t);
    w.lambda_l2 = static_cast<float>(cfg.lambda_l2);
    w.lambda_s = static_cast<float>(cfg.lambda_s);
    w.tau = static_cast<float>(cfg.tau);
    return w;
}

SupervisedConfig sup_cfg(const RunConfig& cfg) {
    SupervisedConfig s;
    s.steps = cfg.teacher_steps;
    s.batch = static_cast<std::size_t>(cfg.teacher_batch);
    s.sched = {cfg.teacher_lr, cfg.warmup_steps, cfg.decay_interval, cfg.decay};
    s.momentum = cfg.momentum;
    s.eval_every = cfg.eval_every;
    s.seed = derive_seed(cfg.seed, kTeacherShuffle);
    return s;
}

DistillConfig kd_cfg(const RunConfig& cfg) {
    DistillConfig d;
    d.steps = cfg.distill_steps;
    d.batch = static_cast<std::size_t>(cfg.distill_batch);
    d.sched = {cfg.distill_lr, cfg.warmup_steps, cfg.decay_interval, cfg.decay};
    d.momentum = cfg.momentum;
    d.tau = cfg.tau;
    d.eval_every = cfg.eval_every;
    d.seed = cfg.seed;
    return d;
}

GenTrainConfig gen_cfg(const RunConfig& cfg, ObjectiveMode mode) {
    GenTrainConfig g;
    g.steps = cfg.gen_steps;
    g.batch = static_cast<std::size_t>(cfg.gen_batch);
    g.lr = cfg.gen_lr;
    g.weights = weights_of(cfg);
    g.mode = mode;
    g.seed = derive_seed(cfg.seed, kGenTrain);
    return g;
}

SynthConfig synth_cfg(const RunConfig& cfg, std::uint64_t stream) {
    SynthConfig s;
    s.steps = cfg.synth_steps;
    s.lr = cfg.synth_lr;
    s.seed = derive_seed(derive_seed(cfg.seed, kSynthSeed), stream);
    return s;
}

ObjectiveMode objective_of(const std::string& name) {
    if (name == "both") return ObjectiveMode::Both;
    if (name == "inceptionism") return ObjectiveMode::InceptionismOnly;
    if (name == "moment") return ObjectiveMode::MomentOnly;
    throw ConfigError("unknown objective '" + name + "'");
}

ImageFormat format_of(const RunConfig& cfg) {
    if (cfg.channels == 1) return ImageFormat::Pgm;
    if (cfg.channels == 3) return ImageFormat::Ppm;
    throw ConfigError("image export needs 1 or 3 channels, config has " +
                      std::to_string(cfg.channels));
}

std::string grid_name(const RunConfig& cfg) {
    return cfg.channels == 3 ? "samples.ppm" : "samples.pgm";
}

std::vector<int> parse_subset(const std::string& text, int class_count) {
    if (text.empty()) {
        std::vector<int> all(static_cast<std::size_t>(class_count));
        for (int c = 0; c < class_count; ++c) all[static_cast<std::size_t>(c)] = c;
        return all;
    }
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        std::size_t comma = text.find(',', pos);
        if (comma == std::string::npos) comma = text.size();
        const std::string item = text.substr(pos, comma - pos);
        try {
            std::size_t used = 0;
            const int v = std::stoi(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError("--subset needs comma-separated class ids, got '" + item + "'");
        }
        pos = comma + 1;
    }
    return out;
}

// per-subset targets for ensemble training, per the requested stats mode
std::vector<MomentTargets<float>> subset_targets(ClassifierModel<float>& teacher,
                                                 const ClassAssignment& asg, const Dataset& train,
                                                 const RunConfig& cfg,
                                                 const std::string& stats_mode) {
    std::vector<MomentTargets<float>> out;
    out.reserve(asg.subsets.size());
    for (std::size_t i = 0; i < asg.subsets.size(); ++i) {
        const auto& subset = asg.subsets[i];
        if (stats_mode == "running") {
            out.push_back(extract_running_moments(teacher));
        } else if (stats_mode == "real") {
            out.push_back(estimate_group_moments_from_data(
                teacher, train, subset, static_cast<std::size_t>(cfg.stats_per_class)));
        } else if (stats_mode == "datafree") {
            out.push_back(estimate_group_moments_datafree(
                teacher, subset, static_cast<std::size_t>(cfg.synth_batch), weights_of(cfg),
                synth_cfg(cfg, i)));
        } else {
            throw ConfigError("unknown stats mode '" + stats_mode + "'");
        }
    }
    return out;
}

// one eval-mode sample per row, conditioning labels cycling the generator's
// subset so a grid shows every condition
Tensorf sample_generator_batch(GeneratorModel<float>& gen, std::size_t count,
                               std::uint64_t seed) {
    const std::size_t ch = static_cast<std::size_t>(gen.cfg.out_channels);
    const std::size_t sz = static_cast<std::size_t>(gen.cfg.target_size);
    const std::size_t per = ch * sz * sz;
    const LatentSpec prior{gen.cfg.latent_dim};
    Rng rng(seed);
    Tensorf out = Tensorf::zeros({count, ch, sz, sz});
    for (std::size_t i = 0; i < count; ++i) {
        const int yi = static_cast<int>(i % static_cast<std::size_t>(gen.cfg.class_count));
        Tensorf z = sample_latent<float>(prior, 1, rng);
        Tape<float> tape;
        Var img = generator_forward(tape, gen, z, {yi}, Mode::Eval);
        std::memcpy(out.data.data() + i * per, tape.value(img).data.data(), per * sizeof(float));
    }
    return out;
}

void write_loss_csv(const std::vector<double>& loss, const std::string& path,
                    const std::string& column) {
    std::vector<std::vector<double>> rows;
    rows.reserve(loss.size());
    for (std::size_t i = 0; i < loss.size(); ++i)
        rows.push_back({static_cast<double>(i), loss[i]});
    write_csv(path, "step," + column, rows);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

int cmd_train_teacher(const CommonOpts& o) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    auto [train, test] = make_data(cfg);
    auto teacher = build_classifier<float>(teacher_arch(cfg), derive_seed(cfg.seed, kTeacherInit));
    auto res = train_supervised(teacher, train, sup_cfg(cfg), &test);
    teacher.freeze();
    save_classifier(teacher, o.out + "/teacher.gdfd", {{"role", "teacher"}});
    save_history(res.history, o.out + "/metrics.csv", "ce_loss");
    write_manifest(o.out, "train-teacher", cfg, {"teacher.gdfd", "metrics.csv"});
    std::cout << "teacher test accuracy " << fmt17(res.final_accuracy) << "\n";
    return 0;
}

int cmd_estimate_stats(const CommonOpts& o, const std::string& teacher_path,
                       const std::string& mode) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    auto teacher = load_classifier(teacher_path);
    const std::string path = o.out + "/moments.gdfd";
    if (mode == "running") {
        save_moments(extract_running_moments(teacher), path);
    } else {
        auto [train, test] = make_data(cfg);
        Checkpoint ck;
        ck.set_meta("kind", "moments");
        ck.set_meta("mode", mode);
        ck.set_meta("classes", std::to_string(cfg.classes));
        for (int c = 0; c < cfg.classes; ++c) {
            MomentTargets<float> t =
                mode == "real"
                    ? estimate_class_moments_from_data(
                          teacher, train, c, static_cast<std::size_t>(cfg.stats_per_class))
                    : estimate_class_moments_datafree(
                          teacher, c, static_cast<std::size_t>(cfg.synth_batch), weights_of(cfg),
                          synth_cfg(cfg, static_cast<std::uint64_t>(c)));
            add_moments(ck, "class_" + std::to_string(c), t);
        }
        save_checkpoint(ck, path);
    }
    write_manifest(o.out, "estimate-stats", cfg, {"moments.gdfd"});
    std::cout << "wrote " << path << "\n";
    return 0;
}

MomentTargets<float> load_targets(ClassifierModel<float>& teacher, const std::string& moments_path,
                                  const std::string& prefix) {
    if (moments_path.empty()) return extract_running_moments(teacher);
    return read_moments<float>(load_checkpoint(moments_path), prefix);
}

int cmd_train_generator(const CommonOpts& o, const std::string& teacher_path,
                        const std::string& subset_text, const std::string& moments_path,
                        const std::string& moments_prefix, const std::string& objective) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    auto teacher = load_classifier(teacher_path);
    const std::vector<int> subset = parse_subset(subset_text, teacher.cfg.class_count);
    const MomentTargets<float> targets = load_targets(teacher, moments_path, moments_prefix);
    TrainedGenerator tg = train_generator(teacher, targets, subset, gen_arch(cfg),
                                          gen_cfg(cfg, objective_of(objective)));
    save_generator(tg.model, o.out + "/generator.gdfd", {{"subset", subset_text}});
    write_loss_csv(tg.loss, o.out + "/loss.csv", "gen_loss");
    const std::string grid = grid_name(cfg);
    write_image_grid(sample_generator_batch(tg.model, 16, derive_seed(cfg.seed, kSampleSeed)), 4,
                     o.out + "/" + grid, format_of(cfg));
    write_manifest(o.out, "train-generator", cfg, {"generator.gdfd", "loss.csv", grid});
    std::cout << "final generator loss " << fmt17(tg.loss.back()) << "\n";
    return 0;
}

int cmd_train_ensemble(const CommonOpts& o, const std::string& teacher_path, int generators,
                       int workers, const std::string& stats_mode, const std::string& objective) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    auto teacher = load_classifier(teacher_path);
    auto [train, test] = make_data(cfg);
    const int k = generators > 0 ? generators : cfg.generators;
    const int w = workers > 0 ? workers : cfg.workers;
    const ClassAssignment asg = group_classes(cfg.classes, k);
    const auto targets = subset_targets(teacher, asg, train, cfg, stats_mode);
    EnsembleHandle ens = train_ensemble(teacher, asg, targets, gen_arch(cfg),
                                        gen_cfg(cfg, objective_of(objective)), w);
    std::vector<std::string> artifacts{"ensemble/ensemble.gdfd"};
    save_ensemble(ens, o.out + "/ensemble");
    for (std::size_t i = 0; i < ens.members.size(); ++i) {
        const std::string name = "loss_gen" + std::to_string(i) + ".csv";
        write_loss_csv(ens.members[i].loss, o.out + "/" + name, "gen_loss");
        artifacts.push_back(name);
    }
    const std::string grid = grid_name(cfg);
    EnsembleSample sample = sample_ensemble(ens, 16, derive_seed(cfg.seed, kSampleSeed));
    write_image_grid(sample.images, 4, o.out + "/" + grid, format_of(cfg));
    artifacts.push_back(grid);
    write_manifest(o.out, "train-ensemble", cfg, artifacts);
    std::cout << "trained " << ens.members.size() << " generators\n";
    return 0;
}

int cmd_synth_direct(const CommonOpts& o, const std::string& teacher_path, int count, int label,
                     const std::string& moments_path, const std::string& moments_prefix) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    auto teacher = load_classifier(teacher_path);
    const int n = count > 0 ? count : cfg.synth_batch;
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i)
        labels[static_cast<std::size_t>(i)] = label >= 0 ? label : i % teacher.cfg.class_count;
    const MomentTargets<float> targets = load_targets(teacher, moments_path, moments_prefix);
    SynthResult<float> res =
        synthesize_images_direct(teacher, labels, targets, weights_of(cfg), synth_cfg(cfg, 0));
    const std::string grid = cfg.channels == 3 ? "images.ppm" : "images.pgm";
    write_image_grid(res.images, 4, o.out + "/" + grid, format_of(cfg));
    write_loss_csv(res.loss, o.out + "/loss.csv", "image_loss");
    write_manifest(o.out, "synth-direct", cfg, {grid, "loss.csv"});
    std::cout << "final image loss " << fmt17(res.loss.back()) << "\n";
    return 0;
}

int cmd_distill(const CommonOpts& o, const std::string& teacher_path, const std::string& source,
                const std::string& ensemble_path) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    auto teacher = load_classifier(teacher_path);
    auto [train, test] = make_data(cfg);
    auto student = build_classifier<float>(student_arch(cfg), derive_seed(cfg.seed, kStudentInit));

    EnsembleHandle ens;
    std::unique_ptr<ImageSource> src;
    if (source == "ensemble") {
        if (ensemble_path.empty())
            throw ConfigError("--source ensemble needs --ensemble MANIFEST");
        ens = load_ensemble(ensemble_path);
        src = std::make_unique<EnsembleSource>(ens, derive_seed(cfg.seed, kSourceSeed));
    } else if (source == "dataset") {
        src = std::make_unique<DatasetSource>(train, derive_seed(cfg.seed, kSourceSeed));
    } else if (source == "noise") {
        src = std::make_unique<NoiseSource>(cfg.channels, cfg.image_size,
                                            derive_seed(cfg.seed, kSourceSeed));
    } else {
        throw ConfigError("unknown source '" + source + "'");
    }

    DistillResult res = distill(teacher, student, *src, kd_cfg(cfg), &test);
    save_classifier(student, o.out + "/student.gdfd", {{"role", "student"}, {"source", source}});
    save_history(res.history, o.out + "/metrics.csv", "kd_loss");
    write_text(o.out + "/summary.csv",
               "source,final_accuracy\n" + source + "," + fmt17(res.final_accuracy) + "\n");
    write_manifest(o.out, "distill", cfg, {"student.gdfd", "metrics.csv", "summary.csv"});
    std::cout << "student test accuracy " << fmt17(res.final_accuracy) << "\n";
    return 0;
}

int cmd_eval(const CommonOpts& o, const std::string& model_path, const std::string& split) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    auto model = load_classifier(model_path);
    auto [train, test] = make_data(cfg);
    const double acc = evaluate(model, split == "train" ? train : test);
    write_text(o.out + "/eval.csv", "split,accuracy\n" + split + "," + fmt17(acc) + "\n");
    write_manifest(o.out, "eval", cfg, {"eval.csv"});
    std::cout << split << " accuracy " << fmt17(acc) << "\n";
    return 0;
}

int cmd_export_samples(const CommonOpts& o, const std::string& ensemble_path,
                       const std::string& generator_path, int count, int cols) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    if (ensemble_path.empty() == generator_path.empty())
        throw ConfigError("export-samples needs exactly one of --ensemble / --generator");
    const std::string grid = grid_name(cfg);
    std::vector<std::string> artifacts{grid};
    if (!ensemble_path.empty()) {
        EnsembleHandle ens = load_ensemble(ensemble_path);
        EnsembleSample sample = sample_ensemble(ens, static_cast<std::size_t>(count),
                                                derive_seed(cfg.seed, kSampleSeed));
        write_image_grid(sample.images, static_cast<std::size_t>(cols), o.out + "/" + grid,
                         format_of(cfg));
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < sample.labels.size(); ++i)
            rows.push_back({static_cast<double>(i), static_cast<double>(sample.labels[i]),
                            static_cast<double>(sample.generator_ids[i])});
        write_csv(o.out + "/labels.csv", "index,label,generator", rows);
        artifacts.push_back("labels.csv");
    } else {
        auto gen = load_generator(generator_path);
        write_image_grid(sample_generator_batch(gen, static_cast<std::size_t>(count),
                                                derive_seed(cfg.seed, kSampleSeed)),
                         static_cast<std::size_t>(cols), o.out + "/" + grid, format_of(cfg));
    }
    write_manifest(o.out, "export-samples", cfg, artifacts);
    std::cout << "wrote " << o.out << "/" << grid << "\n";
    return 0;
}

int cmd_ablate(const CommonOpts& o, const std::string& mode, const std::string& teacher_path,
               const std::string& stats_mode) {
    const RunConfig cfg = resolve(o);
    fs::create_directories(o.out);
    auto [train, test] = make_data(cfg);

    ClassifierModel<float> teacher;
    if (teacher_path.empty()) {
        teacher = build_classifier<float>(teacher_arch(cfg), derive_seed(cfg.seed, kTeacherInit));
        train_supervised(teacher, train, sup_cfg(cfg), &test);
        teacher.freeze();
        save_classifier(teacher, o.out + "/teacher.gdfd", {{"role", "teacher"}});
    } else {
        teacher = load_classifier(teacher_path);
        teacher.freeze();
    }

    auto run_arm = [&](const std::string& tag, const ClassAssignment& asg, ObjectiveMode obj) {
        const std::string dir = o.out + "/" + tag;
        fs::create_directories(dir);
        const auto targets = subset_targets(teacher, asg, train, cfg, stats_mode);
        EnsembleHandle ens = train_ensemble(teacher, asg, targets, gen_arch(cfg),
                                            gen_cfg(cfg, obj), cfg.workers);
        save_ensemble(ens, dir + "/ensemble");
        auto student =
            build_classifier<float>(student_arch(cfg), derive_seed(cfg.seed, kStudentInit));
        EnsembleSource src(ens, derive_seed(cfg.seed, kSourceSeed));
        DistillResult res = distill(teacher, student, src, kd_cfg(cfg), &test);
        save_classifier(student, dir + "/student.gdfd", {{"role", "student"}, {"arm", tag}});
        save_history(res.history, dir + "/metrics.csv");
        return res.final_accuracy;
    };

    if (mode == "losses") {
        const ClassAssignment asg = group_classes(cfg.classes, cfg.generators);
        std::string summary = "arm,accuracy\n";
        for (const auto& [tag, obj] :
             std::vector<std::pair<std::string, ObjectiveMode>>{
                 {"inceptionism", ObjectiveMode::InceptionismOnly},
                 {"moment", ObjectiveMode::MomentOnly},
                 {"both", ObjectiveMode::Both}}) {
            const double acc = run_arm(tag, asg, obj);
            summary += tag + "," + fmt17(acc) + "\n";
            std::cout << tag << " accuracy " << fmt17(acc) << "\n";
        }
        write_text(o.out + "/summary.csv", summary);
    } else {
        std::vector<int> ks{1, std::max(1, cfg.classes / 2), cfg.classes};
        ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
        std::vector<std::vector<double>> rows;
        for (int k : ks) {
            const double acc = run_arm("k" + std::to_string(k), group_classes(cfg.classes, k),
                                       ObjectiveMode::Both);
            rows.push_back({static_cast<double>(k), acc});
            std::cout << "k=" << k << " accuracy " << fmt17(acc) << "\n";
        }
        write_csv(o.out + "/summary.csv", "generators,accuracy", rows);
    }
    write_manifest(o.out, "ablate", cfg, {"summary.csv"});
    return 0;
}

} // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"gdfd: data-free distillation pipeline on a procedural toy task"};
    app.require_subcommand(1);

    CommonOpts o;
    std::string teacher_path, model_path, moments_path, ensemble_path, generator_path;
    std::string moments_prefix = "moments";
    std::string stats_mode = "real";
    std::string objective = "both";
    std::string source, split = "test", ablate_mode, subset_text;
    int generators = 0, workers = 0, count = 16, cols = 4, label = -1;

    auto* tt = app.add_subcommand("train-teacher", "supervised training of the frozen teacher");
    add_common(tt, o);

    auto* es = app.add_subcommand("estimate-stats", "write per-class or running moment targets");
    add_common(es, o);
    es->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    es->add_option("--mode", stats_mode, "running|real|datafree")
        ->check(CLI::IsMember({"running", "real", "datafree"}));

    auto* tg = app.add_subcommand("train-generator", "train one conditional generator");
    add_common(tg, o);
    tg->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    tg->add_option("--subset", subset_text, "classes the generator owns (default: all)");
    tg->add_option("--moments", moments_path, "moment targets file (default: running stats)");
    tg->add_option("--moments-prefix", moments_prefix, "targets prefix inside --moments");
    tg->add_option("--objective", objective, "both|inceptionism|moment")
        ->check(CLI::IsMember({"both", "inceptionism", "moment"}));

    auto* te = app.add_subcommand("train-ensemble", "train k generators over a class partition");
    add_common(te, o);
    te->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    te->add_option("--generators", generators, "member count (default: config)");
    te->add_option("--workers", workers, "parallel trainers (default: config)");
    te->add_option("--stats", stats_mode, "running|real|datafree")
        ->check(CLI::IsMember({"running", "real", "datafree"}));
    te->add_option("--objective", objective, "both|inceptionism|moment")
        ->check(CLI::IsMember({"both", "inceptionism", "moment"}));

    auto* sd = app.add_subcommand("synth-direct", "optimize image batches against the teacher");
    add_common(sd, o);
    sd->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    sd->add_option("--count", count, "images to synthesize (default: config batch)");
    sd->add_option("--label", label, "single class id (default: cycle all classes)");
    sd->add_option("--moments", moments_path, "moment targets file (default: running stats)");
    sd->add_option("--moments-prefix", moments_prefix, "targets prefix inside --moments");

    auto* di = app.add_subcommand("distill", "distill the teacher into a fresh student");
    add_common(di, o);
    di->add_option("--teacher", teacher_path, "teacher checkpoint")->required();
    di->add_option("--source", source, "ensemble|dataset|noise")
        ->required()
        ->check(CLI::IsMember({"ensemble", "dataset", "noise"}));
    di->add_option("--ensemble", ensemble_path, "ensemble manifest (for --source ensemble)");

    auto* ev = app.add_subcommand("eval", "accuracy of a checkpoint on a toy split");
    add_common(ev, o);
    ev->add_option("--model", model_path, "classifier checkpoint")->required();
    ev->add_option("--split", split, "train|test")->check(CLI::IsMember({"train", "test"}));

    auto* ex = app.add_subcommand("export-samples", "write a sample image grid");
    add_common(ex, o);
    ex->add_option("--ensemble", ensemble_path, "ensemble manifest");
    ex->add_option("--generator", generator_path, "single generator checkpoint");
    ex->add_option("--count", count, "samples to draw");
    ex->add_option("--cols", cols, "grid columns");

    auto* ab = app.add_subcommand("ablate", "loss or generator-count ablation");
    add_common(ab, o);
    ab->add_option("--mode", ablate_mode, "losses|generators")
        ->required()
        ->check(CLI::IsMember({"losses", "generators"}));
    ab->add_option("--teacher", teacher_path, "reuse a teacher checkpoint (default: train one)");
    ab->add_option("--stats", stats_mode, "running|real|datafree")
        ->check(CLI::IsMember({"running", "real", "datafree"}));

    std::vector<std::string> storage;
    storage.reserve(args.size() + 1);
    storage.push_back("gdfd");
    storage.insert(storage.end(), args.begin(), args.end());
    std::vector<char*> argv;
    argv.reserve(storage.size());
    for (std::string& s : storage) argv.push_back(s.data());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        app.exit(e);
        return 0;
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*tt) return cmd_train_teacher(o);
        if (*es) return cmd_estimate_stats(o, teacher_path, stats_mode);
        if (*tg) return cmd_train_generator(o, teacher_path, subset_text, moments_path,
                                            moments_prefix, objective);
        if (*te) return cmd_train_ensemble(o, teacher_path, generators, workers, stats_mode,
                                           objective);
        if (*sd) return cmd_synth_direct(o, teacher_path, count, label, moments_path,
                                         moments_prefix);
        if (*di) return cmd_distill(o, teacher_path, source, ensemble_path);
        if (*ev) return cmd_eval(o, model_path, split);
        if (*ex) return cmd_export_samples(o, ensemble_path, generator_path, count, cols);
        if (*ab) return cmd_ablate(o, ablate_mode, teacher_path, stats_mode);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}

} // namespace gdfd
