#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gdfd/data.hpp"
#include "gdfd/gentrain.hpp"
#include "gdfd/nn.hpp"
#include "gdfd/optim.hpp"

namespace gdfd {

// One history row per training step. eval_accuracy is -1 on steps where no
// evaluation ran; evaluations happen after the update of every
// eval_every-th step and always after the last one.
struct MetricRow {
    long step = 0;
    double lr = 0.0;
    double loss = 0.0;
    double eval_accuracy = -1.0;
};

// Writes `step,lr,<loss_column>,eval_accuracy` rows via the common CSV
// formatter, so reruns stay byte-identical.
void save_history(const std::vector<MetricRow>& history, const std::string& path,
                  const std::string& loss_column = "kd_loss");

struct DistillConfig {
    long steps = 3000;
    std::size_t batch = 32;
    ScheduleConfig sched; // warmup then geometric decay, momentum optimizer
    double momentum = 0.9;
    double tau = 3.0;
    long eval_every = 200;
    // distill() itself draws nothing; callers derive the image-source and
    // student-init seeds from this so one value pins the whole run
    std::uint64_t seed = 0;
};

struct DistillResult {
    std::vector<MetricRow> history;
    double final_accuracy = -1.0; // last evaluation, -1 without an eval set
};

// Distills the frozen teacher into the student using only images from
// `source`: soft kd targets at cfg.tau, no labels anywhere. The student is
// updated in place; the teacher is read in eval mode and never modified.
DistillResult distill(ClassifierModel<float>& teacher, ClassifierModel<float>& student,
                      ImageSource& source, const DistillConfig& cfg,
                      const Dataset* eval_set = nullptr);

struct SupervisedConfig {
    long steps = 2000;
    std::size_t batch = 32;
    ScheduleConfig sched;
    double momentum = 0.9;
    long eval_every = 200;
    std::uint64_t seed = 0; // orders the per-epoch batch shuffle
};

struct SupervisedResult {
    std::vector<MetricRow> history;
    double final_accuracy = -1.0;
};

// Cross-entropy training on real labelled data (teacher and the supervised
// student baseline). Same momentum optimizer and schedule as distill().
SupervisedResult train_supervised(ClassifierModel<float>& model, const Dataset& train,
                                  const SupervisedConfig& cfg,
                                  const Dataset* eval_set = nullptr);

// Eval-mode argmax accuracy over the whole set; `batch` only sizes the
// forward chunks and cannot change the result.
double evaluate(ClassifierModel<float>& model, const Dataset& data, std::size_t batch = 64);

} // namespace gdfd
