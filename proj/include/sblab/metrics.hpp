#pragma once

#include <string>
#include <vector>

#include "sblab/data.hpp"
#include "sblab/model.hpp"
#include "sblab/teacher.hpp"
#include "sblab/train.hpp"

namespace sblab {

enum class ProbeTarget { Action, Scene };
enum class TransferMode { Finetune, FrozenProbe };

struct ProbeResult {
    double accuracy = 0.0;
    double chance = 0.0;
    ProbeTarget target = ProbeTarget::Action;
    std::string feature_source;
};

// Multinomial logistic regression on frozen features: 80/20 split by seeded
// shuffle, full-batch gradient descent (lr 0.1, 500 iterations, zero init,
// no regularization); accuracy reported on the held-out 20%.
ProbeResult linear_probe(const std::vector<std::vector<double>>& features,
                         const std::vector<int>& labels, int classes, uint64_t seed);

// log(accuracy / chance) with the accuracy floored at chance, so the result
// is never negative.
double bias_from_accuracy(double accuracy, double chance);

// Scene representation bias: probes ACTION labels from the teacher's pooled
// scene features and returns log(probe accuracy / (1/N)).
double scene_bias(const DatasetSplit& dataset, TeacherModel& scene_rep, uint64_t seed);

struct TransferResult {
    double accuracy = 0.0;
    double chance = 0.0;
    std::string warning;  // set when the target family matches the source
};

// FINETUNE trains extractor + fresh head on the target and reports test
// accuracy; FROZEN_PROBE probes extractor features on the target train split.
TransferResult transfer_eval(DebiasModel& checkpoint, const DatasetSpec& target_spec,
                             TransferMode mode, const TrainConfig& cfg);

struct PearsonResult {
    double rho = 0.0;
    double t_statistic = 0.0;
    int n = 0;
};

PearsonResult pearson(const std::vector<double>& x, const std::vector<double>& y);

struct BiasReportRow {
    std::string dataset;
    double beta = 0.0;
    double b_scene = 0.0;
    double acc_baseline = 0.0;
    double acc_debiased = 0.0;
    double rel_improvement = 0.0;
};

struct BiasReport {
    std::vector<BiasReportRow> rows;
    PearsonResult summary;
};

struct SweepConfig {
    DatasetSpec source;            // CARDINAL source dataset
    std::vector<double> target_betas;
    int target_count = 2000;       // per target split
    TrainConfig pretrain_cfg;      // shared by baseline and debiased runs
    TrainConfig finetune_cfg;      // used by FINETUNE transfer
    TransferMode mode = TransferMode::Finetune;
    int teacher_epochs = 20;
    double teacher_lr = 0.05;
    uint64_t seed = 0;
};

// Pretrains one baseline and one debiased model on the source, then for each
// target beta builds a DIAGONAL target, measures its scene bias and both
// transfer accuracies, and correlates relative improvement against bias.
BiasReport bias_sweep(const SweepConfig& cfg);

void write_bias_report_csv(const std::string& path, const BiasReport& report);
void write_bias_report_gnuplot(const std::string& path, const BiasReport& report);
BiasReport read_bias_report_csv(const std::string& path);

}  // namespace sblab
