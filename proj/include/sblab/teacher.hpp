#pragma once

#include <string>
#include <vector>

#include "sblab/data.hpp"
#include "sblab/tensor.hpp"

namespace sblab {

enum class PseudoMode { Soft, Hard };

struct TeacherConfig {
    int channels = 8;
    int kernel = 3;
    int num_scenes = 4;
};

// Small scene classifier standing in for an off-the-shelf scene network:
// conv -> relu -> mean pool over time and space -> linear head to M logits.
// Its pooled pre-logit vector doubles as the scene feature representation
// used by the bias probes.
struct TeacherModel {
    TeacherConfig cfg;
    Parameter conv_w, conv_b;  // [C,1,k,k], [C]
    Parameter head_w, head_b;  // [C,M], [M]
    std::string digest;

    std::vector<Parameter*> params() { return {&conv_w, &conv_b, &head_w, &head_b}; }
};

TeacherModel init_teacher(const TeacherConfig& cfg, uint64_t seed);

struct TeacherTrainConfig {
    int epochs = 20;
    double lr = 0.05;
    double momentum = 0.9;
    int batch_size = 32;
    uint64_t seed = 0;
};

// Trains on scene labels with an internal 80/20 holdout; the final holdout
// scene accuracy lands in the digest.
TeacherModel train_teacher(const DatasetSplit& data, const TeacherTrainConfig& cfg);
TeacherModel train_teacher(const DatasetSplit& data, int epochs, double lr, uint64_t seed);

// Pooled pre-logit features, gradient-free.
std::vector<double> teacher_features(TeacherModel& teacher, const Clip& clip);
std::vector<double> teacher_logits(TeacherModel& teacher, const Clip& clip);

// Graph-building forward for training: pooled features for one clip.
Val teacher_pooled_graph(Tape& tape, TeacherModel& teacher, const Clip& clip, bool track_grads);

PseudoSceneLabel pseudo_label(TeacherModel& teacher, const Clip& clip, PseudoMode mode);

// Fraction of clips whose argmax teacher prediction equals the true scene.
double teacher_scene_accuracy(TeacherModel& teacher, std::span<const Clip> clips);

void save_teacher(const std::string& path, TeacherModel& teacher);
TeacherModel load_teacher(const std::string& path);

}  // namespace sblab
