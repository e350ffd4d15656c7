#pragma once

#include <optional>
#include <string>
#include <vector>

#include "sblab/data.hpp"
#include "sblab/teacher.hpp"
#include "sblab/tensor.hpp"

namespace sblab {

struct ModelConfig {
    int conv_channels = 8;  // feature-map channels C
    int kernel = 3;
    int feature_dim = 32;   // F
    int hidden = 64;        // scene-head width h
    int num_actions = 8;    // N
    int num_scenes = 4;     // M
    int frames = 8;         // T (>= 3)

    int pooled_dim() const { return (frames - 2) * conv_channels; }
    void validate() const;
};

// Feature extractor + action head + adversarial scene head.
//
// The extractor runs a per-frame conv, takes lag-2 temporal differences of
// the raw conv maps, rectifies, mean-pools each map and maps the pooled
// vector through a linear layer to the F-dim feature space. Differencing the
// pre-activation maps keeps the motion dipole visible to the 3x3 kernels;
// rectifying the already-pooled maps would collapse opposite motion
// directions onto identical features.
struct DebiasModel {
    ModelConfig cfg;
    Parameter conv_w, conv_b;  // [C,1,k,k], [C]
    Parameter fc_w, fc_b;      // [P,F], [F]
    Parameter act_w, act_b;    // [F,N], [N]
    Parameter s1_w, s1_b;      // [F,h], [h]
    Parameter s2_w, s2_b;      // [h,h], [h]
    Parameter s3_w, s3_b;      // [h,h], [h]
    Parameter s4_w, s4_b;      // [h,M], [M]

    std::vector<Parameter*> feature_params();  // theta_f
    std::vector<Parameter*> action_params();   // theta_A
    std::vector<Parameter*> scene_params();    // theta_S
    std::vector<Parameter*> all_params();
};

// Glorot-uniform weights, zero biases, one labeled sub-seed per tensor.
DebiasModel init_model(const ModelConfig& cfg, uint64_t seed);

struct FeatureGraph {
    Val features;                 // [F]
    std::vector<Val> diff_maps;   // relu'd lag-2 difference maps, [C,H-2,W-2] each
};

FeatureGraph extract_features_graph(Tape& tape, DebiasModel& model, const Clip& clip,
                                    bool track_grads);
// Stacked per-clip features for a batch: [B,F].
Val features_rows_graph(Tape& tape, DebiasModel& model, std::span<const Clip* const> batch,
                        bool track_grads);
Val action_logits_rows(Tape& tape, DebiasModel& model, Val features_rows, bool track_grads);
Val scene_logits_rows(Tape& tape, DebiasModel& model, Val features_rows, bool track_grads);

// Gradient-free feature vector for probing.
std::vector<double> extract_features(DebiasModel& model, const Clip& clip);

// Mean cross-entropy of the action head against the true action labels.
Val loss_ce_graph(Tape& tape, DebiasModel& model, std::span<const Clip* const> batch,
                  bool track_grads = true);
// Soft cross-entropy of the scene head against pseudo scene labels, with the
// features routed through grad_reverse(lambda) when with_reversal is set.
Val loss_adv_graph(Tape& tape, DebiasModel& model, std::span<const Clip* const> batch,
                   std::span<const PseudoSceneLabel* const> pseudo, double lambda,
                   bool with_reversal = true, bool track_grads = true);
// Mean entropy of the action distribution; callers pass masked clips.
Val loss_ent_graph(Tape& tape, DebiasModel& model, std::span<const Clip* const> batch,
                   bool track_grads = true);

double loss_ce(DebiasModel& model, std::span<const Clip> batch);
double loss_adv(DebiasModel& model, std::span<const Clip> batch,
                std::span<const PseudoSceneLabel> pseudo, double lambda);
double loss_ent(DebiasModel& model, std::span<const Clip> batch);

// Per-batch bundle of the three losses, any of which may be absent.
struct LossBundle {
    std::optional<double> l_ce, l_adv, l_ent;
};

// Argmax action-head accuracy.
double action_accuracy(DebiasModel& model, std::span<const Clip> clips);

// Class activation map: channel-weighted sum of the temporally averaged
// pre-pool maps, min-max normalized to [0,1] ([H-2, W-2]; constant maps
// normalize to zeros). Channel weights come from the product of the pooled->
// feature and feature->action linear maps.
Tensor cam(DebiasModel& model, const Clip& clip, int class_index);

void save_model(const std::string& path, DebiasModel& model);
DebiasModel load_model(const std::string& path);

}  // namespace sblab
