#include "gdfd/gentrain.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <exception>
#include <filesystem>
#include <mutex>
#include <numeric>
#include <optional>
#include <thread>
#include <utility>

#include "gdfd/optim.hpp"

namespace gdfd {

namespace {

[[noreturn]] void rethrow_with_member(int member, std::exception_ptr ep) {
    const std::string tag = "generator " + std::to_string(member) + ": ";
    try {
        std::rethrow_exception(ep);
    } catch (const DivergenceError& e) {
        throw DivergenceError(tag + e.what(), e.step);
    } catch (const ShapeError& e) {
        throw ShapeError(tag + e.what());
    } catch (const ParamError& e) {
        throw ParamError(tag + e.what());
    } catch (const DataError& e) {
        throw DataError(tag + e.what());
    } catch (const Error& e) {
        throw ContractError(tag + e.what());
    }
}

std::size_t argmax_row(const float* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

std::string join_ints(const std::vector<int>& xs) {
    std::string out;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        if (i) out += ',';
        out += std::to_string(xs[i]);
    }
    return out;
}

std::vector<int> split_ints(const std::string& text) {
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
            throw DataError("ensemble manifest: bad subset entry '" + item + "'");
        }
        pos = comma + 1;
    }
    return out;
}

long parse_count(const std::string& text, const std::string& what) {
    try {
        std::size_t used = 0;
        const long v = std::stol(text, &used);
        if (used != text.size() || v < 0) throw std::invalid_argument(text);
        return v;
    } catch (const std::exception&) {
        throw DataError("ensemble manifest: bad " + what + " '" + text + "'");
    }
}

} // namespace

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

TrainedGenerator train_generator(ClassifierModel<float>& teacher,
                                 const MomentTargets<float>& targets,
                                 const std::vector<int>& class_subset, const GeneratorConfig& arch,
                                 const GenTrainConfig& cfg) {
    if (!teacher.frozen) throw ContractError("train_generator: teacher must be frozen");
    if (cfg.steps < 1)
        throw ParamError("train_generator: need steps >= 1, got " + std::to_string(cfg.steps));
    if (cfg.batch < 2)
        throw ParamError("train_generator: need batch >= 2, got " + std::to_string(cfg.batch));
    if (!(cfg.lr > 0.0)) throw ParamError("train_generator: learning rate must be positive");
    if (class_subset.empty()) throw ParamError("train_generator: empty class subset");
    for (int c : class_subset)
        if (c < 0 || c >= teacher.cfg.class_count)
            throw ParamError("train_generator: class " + std::to_string(c) + " outside [0, " +
                             std::to_string(teacher.cfg.class_count) + ")");
    {
        std::vector<int> sorted = class_subset;
        std::sort(sorted.begin(), sorted.end());
        if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
            throw ParamError("train_generator: duplicate class in subset");
    }
    if (targets.layers.size() != teacher.bn_registry().size())
        throw ContractError("train_generator: targets cover " +
                            std::to_string(targets.layers.size()) + " layers, teacher has " +
                            std::to_string(teacher.bn_registry().size()));
    cfg.weights.validate();

    GeneratorConfig g = arch;
    g.class_count = static_cast<int>(class_subset.size());
    g.out_channels = teacher.cfg.in_channels;
    g.target_size = teacher.cfg.input_size;

    TrainedGenerator out;
    out.model = build_generator<float>(g, cfg.seed);
    out.subset = class_subset;
    out.targets = targets;
    out.loss.reserve(static_cast<std::size_t>(cfg.steps));

    out.model.set_requires_grad(true);
    const auto params = out.model.parameters();
    AdamState<float> opt(params);
    Rng draw(derive_seed(cfg.seed, 1));
    const LatentSpec prior{g.latent_dim};
    for (long s = 0; s < cfg.steps; ++s) {
        // canonical draw order per step: batch labels first, then the latents
        std::vector<int> labels(cfg.batch);
        for (int& l : labels) l = class_subset[draw.below(class_subset.size())];
        Tensorf z = sample_latent<float>(prior, cfg.batch, draw);

        for (Tensor<float>* p : params) p->zero_grad();
        Tape<float> tape;
        auto parts = generator_objective(tape, out.model, teacher, z, labels, out.subset,
                                         out.targets, cfg.weights, cfg.mode);
        const float lv = tape.value(parts.total).data[0];
        if (!std::isfinite(static_cast<double>(lv)))
            throw DivergenceError("train_generator: non-finite objective at step " +
                                      std::to_string(s),
                                  s);
        out.loss.push_back(static_cast<double>(lv));
        tape.backward(parts.total);
        adam_step<float>(params, opt, static_cast<float>(cfg.lr));
    }
    out.model.set_requires_grad(false);
    for (Tensor<float>* p : params) p->grad.clear();
    return out;
}

EnsembleHandle train_ensemble(ClassifierModel<float>& teacher, const ClassAssignment& assignment,
                              const std::vector<MomentTargets<float>>& per_subset_targets,
                              const GeneratorConfig& arch, const GenTrainConfig& cfg,
                              int workers) {
    const int k = assignment.k;
    if (k < 1 || assignment.subsets.size() != static_cast<std::size_t>(k))
        throw ParamError("train_ensemble: malformed assignment");
    if (per_subset_targets.size() != static_cast<std::size_t>(k))
        throw ContractError("train_ensemble: " + std::to_string(per_subset_targets.size()) +
                            " target sets for " + std::to_string(k) + " generators");

    EnsembleHandle out;
    out.assignment = assignment;
    out.latent.dim = arch.latent_dim;
    out.members.resize(static_cast<std::size_t>(k));

    auto member_cfg = [&](int i) {
        GenTrainConfig mcfg = cfg;
        mcfg.seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(i));
        return mcfg;
    };

    if (workers > 1 && k > 1) {
        const int nthreads = std::min(workers, k);
        std::atomic<int> cursor{0};
        std::mutex errors_mutex;
        std::vector<std::pair<int, std::exception_ptr>> errors;
        auto work = [&] {
            for (;;) {
                const int i = cursor.fetch_add(1);
                if (i >= k) return;
                try {
                    // private teacher copy: forward passes scribble on BN
                    // scratch buffers, so members must not share one
                    ClassifierModel<float> local = teacher;
                    out.members[static_cast<std::size_t>(i)] =
                        train_generator(local, per_subset_targets[static_cast<std::size_t>(i)],
                                        assignment.subsets[static_cast<std::size_t>(i)], arch,
                                        member_cfg(i));
                } catch (...) {
                    std::lock_guard<std::mutex> lock(errors_mutex);
                    errors.emplace_back(i, std::current_exception());
                }
            }
        };
        std::vector<std::thread> pool;
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(work);
        for (auto& t : pool) t.join();
        if (!errors.empty()) {
            auto worst = std::min_element(errors.begin(), errors.end(),
                                          [](const auto& a, const auto& b) { return a.first < b.first; });
            rethrow_with_member(worst->first, worst->second);
        }
    } else {
        for (int i = 0; i < k; ++i) {
            try {
                out.members[static_cast<std::size_t>(i)] =
                    train_generator(teacher, per_subset_targets[static_cast<std::size_t>(i)],
                                    assignment.subsets[static_cast<std::size_t>(i)], arch,
                                    member_cfg(i));
            } catch (...) {
                rethrow_with_member(i, std::current_exception());
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

EnsembleSample sample_ensemble(EnsembleHandle& ensemble, std::size_t batch, std::uint64_t seed) {
    if (ensemble.members.empty()) throw ContractError("sample_ensemble: empty ensemble");
    if (batch < 1) throw ParamError("sample_ensemble: batch must be >= 1");
    const GeneratorConfig& first = ensemble.members[0].model.cfg;
    const std::size_t ch = static_cast<std::size_t>(first.out_channels);
    const std::size_t sz = static_cast<std::size_t>(first.target_size);
    const std::size_t per = ch * sz * sz;

    EnsembleSample out;
    out.images = Tensorf::zeros({batch, ch, sz, sz});
    out.labels.reserve(batch);
    out.generator_ids.reserve(batch);

    Rng rng(seed);
    for (std::size_t i = 0; i < batch; ++i) {
        const std::size_t g = rng.below(ensemble.members.size());
        TrainedGenerator& member = ensemble.members[g];
        const std::size_t yi = rng.below(member.subset.size());
        const LatentSpec prior{member.model.cfg.latent_dim};
        Tensorf z = sample_latent<float>(prior, 1, rng);

        Tape<float> tape;
        Var img = generator_forward(tape, member.model, z, {static_cast<int>(yi)}, Mode::Eval);
        const Tensorf& iv = tape.value(img);
        std::memcpy(out.images.data.data() + i * per, iv.data.data(), per * sizeof(float));
        out.labels.push_back(member.subset[yi]);
        out.generator_ids.push_back(static_cast<int>(g));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

Tensorf EnsembleSource::next(std::size_t batch) {
    return sample_ensemble(ensemble_, batch, derive_seed(seed_, counter_++)).images;
}

Tensorf NoiseSource::next(std::size_t batch) {
    if (batch < 1) throw ParamError("noise source: batch must be >= 1");
    Tensorf out = Tensorf::randn({batch, static_cast<std::size_t>(channels_),
                                  static_cast<std::size_t>(size_), static_cast<std::size_t>(size_)},
                                 rng_);
    for (float& v : out.data) v = std::clamp(v, -1.0f, 1.0f);
    return out;
}

DatasetSource::DatasetSource(Dataset data, std::uint64_t seed)
    : data_(std::move(data)), rng_(seed) {
    if (data_.size() == 0) throw ParamError("dataset source: empty dataset");
    data_.validate();
    order_.resize(data_.size());
    std::iota(order_.begin(), order_.end(), std::size_t{0});
    reshuffle();
}

void DatasetSource::reshuffle() {
    for (std::size_t i = order_.size(); i > 1; --i)
        std::swap(order_[i - 1], order_[rng_.below(i)]);
    pos_ = 0;
}

Tensorf DatasetSource::next(std::size_t batch) {
    if (batch < 1) throw ParamError("dataset source: batch must be >= 1");
    std::vector<std::size_t> idx;
    idx.reserve(batch);
    while (idx.size() < batch) {
        if (pos_ == order_.size()) reshuffle();
        idx.push_back(order_[pos_++]);
    }
    return data_.gather(idx);
}

// ---------------------------------------------------------------------------
// Diagnostics
// ---------------------------------------------------------------------------

CoverageReport class_coverage(ClassifierModel<float>& teacher, ImageSource& source,
                              std::size_t n_samples) {
    const std::size_t K = static_cast<std::size_t>(teacher.cfg.class_count);
    if (n_samples < K)
        throw ParamError("class_coverage: need at least one sample per class, got " +
                         std::to_string(n_samples) + " for " + std::to_string(K));
    const std::size_t per = static_cast<std::size_t>(teacher.cfg.in_channels) *
                            static_cast<std::size_t>(teacher.cfg.input_size) *
                            static_cast<std::size_t>(teacher.cfg.input_size);

    CoverageReport rep;
    rep.histogram.assign(K, 0);
    std::vector<std::vector<double>> sum(K, std::vector<double>(per, 0.0));
    std::vector<std::vector<double>> sumsq(K, std::vector<double>(per, 0.0));

    std::size_t left = n_samples;
    while (left > 0) {
        const std::size_t b = std::min<std::size_t>(64, left);
        left -= b;
        Tensorf batch = source.next(b);
        Tape<float> tape;
        Var logits = classifier_forward(tape, teacher, batch, Mode::Eval);
        const Tensorf& lv = tape.value(logits);
        for (std::size_t i = 0; i < b; ++i) {
            const std::size_t cls = argmax_row(lv.data.data() + i * K, K);
            ++rep.histogram[cls];
            const float* px = batch.data.data() + i * per;
            for (std::size_t p = 0; p < per; ++p) {
                const double v = px[p];
                sum[cls][p] += v;
                sumsq[cls][p] += v * v;
            }
        }
    }

    std::size_t hit = 0;
    rep.class_variance.assign(K, 0.0);
    for (std::size_t c = 0; c < K; ++c) {
        const long n = rep.histogram[c];
        if (n > 0) ++hit;
        if (n < 2) continue;
        double acc = 0.0;
        for (std::size_t p = 0; p < per; ++p) {
            const double mean = sum[c][p] / static_cast<double>(n);
            acc += std::max(0.0, sumsq[c][p] / static_cast<double>(n) - mean * mean);
        }
        rep.class_variance[c] = acc / static_cast<double>(per);
    }
    rep.coverage = static_cast<double>(hit) / static_cast<double>(K);
    return rep;
}

double subset_hit_rate(ClassifierModel<float>& teacher, EnsembleHandle& ensemble, int member,
                       std::size_t n_samples, std::uint64_t seed) {
    if (member < 0 || static_cast<std::size_t>(member) >= ensemble.members.size())
        throw ParamError("subset_hit_rate: no member " + std::to_string(member));
    if (n_samples < 1) throw ParamError("subset_hit_rate: need n_samples >= 1");
    TrainedGenerator& m = ensemble.members[static_cast<std::size_t>(member)];
    const std::size_t ch = static_cast<std::size_t>(m.model.cfg.out_channels);
    const std::size_t sz = static_cast<std::size_t>(m.model.cfg.target_size);
    const std::size_t per = ch * sz * sz;
    const LatentSpec prior{m.model.cfg.latent_dim};
    const std::size_t K = static_cast<std::size_t>(teacher.cfg.class_count);

    Rng rng(seed);
    long hits = 0;
    std::size_t left = n_samples;
    while (left > 0) {
        const std::size_t b = std::min<std::size_t>(64, left);
        left -= b;
        Tensorf chunk = Tensorf::zeros({b, ch, sz, sz});
        for (std::size_t i = 0; i < b; ++i) {
            const std::size_t yi = rng.below(m.subset.size());
            Tensorf z = sample_latent<float>(prior, 1, rng);
            Tape<float> tape;
            Var img = generator_forward(tape, m.model, z, {static_cast<int>(yi)}, Mode::Eval);
            std::memcpy(chunk.data.data() + i * per, tape.value(img).data.data(),
                        per * sizeof(float));
        }
        Tape<float> tape;
        Var logits = classifier_forward(tape, teacher, chunk, Mode::Eval);
        const Tensorf& lv = tape.value(logits);
        for (std::size_t i = 0; i < b; ++i) {
            const int pred = static_cast<int>(argmax_row(lv.data.data() + i * K, K));
            if (std::find(m.subset.begin(), m.subset.end(), pred) != m.subset.end()) ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(n_samples);
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

std::string save_ensemble(EnsembleHandle& ensemble, const std::string& dir) {
    if (ensemble.members.empty()) throw ContractError("save_ensemble: empty ensemble");
    std::filesystem::create_directories(dir);
    Checkpoint manifest;
    manifest.set_meta("kind", "ensemble");
    manifest.set_meta("k", std::to_string(ensemble.members.size()));
    manifest.set_meta("class_count", std::to_string(ensemble.assignment.class_count));
    for (std::size_t i = 0; i < ensemble.members.size(); ++i) {
        TrainedGenerator& m = ensemble.members[i];
        const std::string file = "gen" + std::to_string(i) + ".gdfd";
        save_generator(m.model, dir + "/" + file, {{"member", std::to_string(i)}});
        manifest.set_meta("member_" + std::to_string(i), file);
        manifest.set_meta("subset_" + std::to_string(i), join_ints(m.subset));
        add_moments(manifest, "targets/" + std::to_string(i), m.targets);
    }
    const std::string path = dir + "/ensemble.gdfd";
    save_checkpoint(manifest, path);
    return path;
}

EnsembleHandle load_ensemble(const std::string& manifest_path) {
    Checkpoint manifest = load_checkpoint(manifest_path);
    if (manifest.find_meta("kind") == nullptr || manifest.meta("kind") != "ensemble")
        throw DataError("load_ensemble: " + manifest_path + " is not an ensemble manifest");
    const long k = parse_count(manifest.meta("k"), "member count");
    const long class_count = parse_count(manifest.meta("class_count"), "class count");
    if (k < 1) throw DataError("load_ensemble: manifest lists no members");

    const std::size_t slash = manifest_path.find_last_of('/');
    const std::string dir = slash == std::string::npos ? "." : manifest_path.substr(0, slash);

    EnsembleHandle out;
    out.assignment.class_count = static_cast<int>(class_count);
    out.assignment.k = static_cast<int>(k);
    out.assignment.generator_of.assign(static_cast<std::size_t>(class_count), -1);
    for (long i = 0; i < k; ++i) {
        const std::string tag = std::to_string(i);
        TrainedGenerator m;
        m.model = load_generator(dir + "/" + manifest.meta("member_" + tag));
        m.subset = split_ints(manifest.meta("subset_" + tag));
        m.targets = read_moments<float>(manifest, "targets/" + tag);
        for (int c : m.subset) {
            if (c < 0 || c >= class_count)
                throw DataError("load_ensemble: class " + std::to_string(c) + " out of range");
            auto& owner = out.assignment.generator_of[static_cast<std::size_t>(c)];
            if (owner != -1)
                throw DataError("load_ensemble: class " + std::to_string(c) + " owned twice");
            owner = static_cast<int>(i);
        }
        out.assignment.subsets.push_back(m.subset);
        out.members.push_back(std::move(m));
    }
    for (long c = 0; c < class_count; ++c)
        if (out.assignment.generator_of[static_cast<std::size_t>(c)] == -1)
            throw DataError("load_ensemble: class " + std::to_string(c) + " unowned");
    out.latent.dim = out.members[0].model.cfg.latent_dim;
    return out;
}

} // namespace gdfd
