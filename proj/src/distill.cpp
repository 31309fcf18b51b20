#include "gdfd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

namespace gdfd {

namespace {

std::size_t argmax_row(const float* row, std::size_t n) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
        if (row[i] > row[best]) best = i;
    return best;
}

void check_loop_params(long steps, std::size_t batch, long warmup, long eval_every,
                       double momentum, const char* who) {
    const std::string tag(who);
    if (steps < 1) throw ParamError(tag + ": need steps >= 1, got " + std::to_string(steps));
    if (batch < 1) throw ParamError(tag + ": need batch >= 1");
    if (warmup >= steps)
        throw ParamError(tag + ": warmup " + std::to_string(warmup) +
                         " must be shorter than the run (" + std::to_string(steps) + " steps)");
    if (eval_every < 1) throw ParamError(tag + ": need eval_every >= 1");
    if (momentum < 0.0 || momentum >= 1.0)
        throw ParamError(tag + ": momentum must lie in [0, 1)");
}

} // namespace

void save_history(const std::vector<MetricRow>& history, const std::string& path,
                  const std::string& loss_column) {
    std::vector<std::vector<double>> rows;
    rows.reserve(history.size());
    for (const MetricRow& r : history)
        rows.push_back({static_cast<double>(r.step), r.lr, r.loss, r.eval_accuracy});
    write_csv(path, "step,lr," + loss_column + ",eval_accuracy", rows);
}

double evaluate(ClassifierModel<float>& model, const Dataset& data, std::size_t batch) {
    if (batch < 1) throw ParamError("evaluate: need batch >= 1");
    if (data.size() == 0) throw DataError("evaluate: empty dataset");
    data.validate();
    const std::size_t K = static_cast<std::size_t>(model.cfg.class_count);
    long correct = 0;
    std::size_t pos = 0;
    while (pos < data.size()) {
        const std::size_t b = std::min(batch, data.size() - pos);
        std::vector<std::size_t> idx(b);
        std::iota(idx.begin(), idx.end(), pos);
        Tensorf images = data.gather(idx);
        Tape<float> tape;
        Var logits = classifier_forward(tape, model, images, Mode::Eval);
        const Tensorf& lv = tape.value(logits);
        for (std::size_t i = 0; i < b; ++i)
            if (argmax_row(lv.data.data() + i * K, K) ==
                static_cast<std::size_t>(data.labels[pos + i]))
                ++correct;
        pos += b;
    }
    return static_cast<double>(correct) / static_cast<double>(data.size());
}

DistillResult distill(ClassifierModel<float>& teacher, ClassifierModel<float>& student,
                      ImageSource& source, const DistillConfig& cfg, const Dataset* eval_set) {
    if (!teacher.frozen) throw ContractError("distill: teacher must be frozen");
    if (student.frozen) throw ContractError("distill: student is frozen");
    if (teacher.cfg.class_count != student.cfg.class_count)
        throw ContractError("distill: teacher has " + std::to_string(teacher.cfg.class_count) +
                            " classes, student " + std::to_string(student.cfg.class_count));
    check_loop_params(cfg.steps, cfg.batch, cfg.sched.warmup, cfg.eval_every, cfg.momentum,
                      "distill");
    if (!(cfg.tau > 0.0)) throw ParamError("distill: temperature must be positive");
    lr_schedule(0, cfg.sched); // surface schedule errors before training

    const auto params = student.parameters();
    student.set_requires_grad(true);
    MomentumState<float> opt(params);
    opt.momentum = static_cast<float>(cfg.momentum);

    DistillResult out;
    out.history.reserve(static_cast<std::size_t>(cfg.steps));
    for (long s = 0; s < cfg.steps; ++s) {
        Tensorf images = source.next(cfg.batch);

        for (Tensor<float>* p : params) p->zero_grad();
        Tape<float> tape;
        Var t_logits = classifier_forward(tape, teacher, images, Mode::Eval);
        Var s_logits = classifier_forward(tape, student, images, Mode::Train);
        Var kd = tape.kd_loss(t_logits, s_logits, static_cast<float>(cfg.tau));
        const float lv = tape.value(kd).data[0];
        if (!std::isfinite(static_cast<double>(lv)))
            throw DivergenceError("distill: non-finite kd loss at step " + std::to_string(s), s);
        tape.backward(kd);
        const double lr = lr_schedule(s, cfg.sched);
        momentum_step<float>(params, opt, static_cast<float>(lr));

        MetricRow row;
        row.step = s;
        row.lr = lr;
        row.loss = static_cast<double>(lv);
        if (eval_set != nullptr && ((s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps)) {
            row.eval_accuracy = evaluate(student, *eval_set);
            out.final_accuracy = row.eval_accuracy;
        }
        out.history.push_back(row);
    }
    student.set_requires_grad(false);
    for (Tensor<float>* p : params) p->grad.clear();
    return out;
}

SupervisedResult train_supervised(ClassifierModel<float>& model, const Dataset& train,
                                  const SupervisedConfig& cfg, const Dataset* eval_set) {
    if (model.frozen) throw ContractError("train_supervised: model is frozen");
    if (train.size() == 0) throw DataError("train_supervised: empty dataset");
    train.validate();
    if (train.class_count != model.cfg.class_count)
        throw ContractError("train_supervised: dataset has " +
                            std::to_string(train.class_count) + " classes, model " +
                            std::to_string(model.cfg.class_count));
    check_loop_params(cfg.steps, cfg.batch, cfg.sched.warmup, cfg.eval_every, cfg.momentum,
                      "train_supervised");
    lr_schedule(0, cfg.sched);

    const auto params = model.parameters();
    model.set_requires_grad(true);
    MomentumState<float> opt(params);
    opt.momentum = static_cast<float>(cfg.momentum);

    Rng rng(cfg.seed);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t pos = order.size(); // forces a shuffle before the first batch
    auto next_index = [&] {
        if (pos == order.size()) {
            for (std::size_t i = order.size(); i > 1; --i)
                std::swap(order[i - 1], order[rng.below(i)]);
            pos = 0;
        }
        return order[pos++];
    };

    SupervisedResult out;
    out.history.reserve(static_cast<std::size_t>(cfg.steps));
    for (long s = 0; s < cfg.steps; ++s) {
        std::vector<std::size_t> idx(cfg.batch);
        for (std::size_t& i : idx) i = next_index();
        Tensorf images = train.gather(idx);
        std::vector<int> labels = train.gather_labels(idx);

        for (Tensor<float>* p : params) p->zero_grad();
        Tape<float> tape;
        Var logits = classifier_forward(tape, model, images, Mode::Train);
        Var ce = tape.cross_entropy(logits, labels);
        const float lv = tape.value(ce).data[0];
        if (!std::isfinite(static_cast<double>(lv)))
            throw DivergenceError("train_supervised: non-finite loss at step " +
                                      std::to_string(s),
                                  s);
        tape.backward(ce);
        const double lr = lr_schedule(s, cfg.sched);
        momentum_step<float>(params, opt, static_cast<float>(lr));

        MetricRow row;
        row.step = s;
        row.lr = lr;
        row.loss = static_cast<double>(lv);
        if (eval_set != nullptr && ((s + 1) % cfg.eval_every == 0 || s + 1 == cfg.steps)) {
            row.eval_accuracy = evaluate(model, *eval_set);
            out.final_accuracy = row.eval_accuracy;
        }
        out.history.push_back(row);
    }
    model.set_requires_grad(false);
    for (Tensor<float>* p : params) p->grad.clear();
    return out;
}

} // namespace gdfd
