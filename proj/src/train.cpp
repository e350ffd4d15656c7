#include "sblab/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>

namespace sblab {

void TrainConfig::validate() const {
    if (lr0 <= 0.0) throw ConfigError("lr0 must be positive");
    if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("momentum must be in [0,1)");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (lambda < 0.0) throw ConfigError("lambda must be non-negative");
    if (epochs < 0) throw ConfigError("epochs must be non-negative");
    if (batch_size < 1) throw ConfigError("batch_size must be positive");
    if (plateau_patience < 1) throw ConfigError("plateau_patience must be >= 1");
    if (lr_divisor <= 1.0) throw ConfigError("lr_divisor must exceed 1");
}

namespace {

struct Snapshot {
    std::vector<std::vector<double>> data;

    static Snapshot take(DebiasModel& m) {
        Snapshot s;
        for (Parameter* p : m.all_params()) s.data.push_back(p->tensor.data);
        return s;
    }

    void restore(DebiasModel& m) const {
        auto params = m.all_params();
        for (size_t i = 0; i < params.size(); ++i) {
            params[i]->tensor.data = data[i];
            params[i]->tensor.grad.reset();
        }
    }
};

void check_finite_loss(double v, const char* what) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + what + " during training");
}

}  // namespace

double validation_ce(DebiasModel& model, const DatasetSplit& split, int batch_size) {
    if (split.clips.empty()) throw ContractError("validation_ce: empty split");
    double sum = 0.0;
    for (size_t start = 0; start < split.clips.size(); start += batch_size) {
        size_t end = std::min(split.clips.size(), start + batch_size);
        std::span<const Clip> batch(split.clips.data() + start, end - start);
        sum += loss_ce(model, batch) * static_cast<double>(end - start);
    }
    return sum / static_cast<double>(split.clips.size());
}

TrainLog pretrain(DebiasModel& model, const DatasetSplit& train, const DatasetSplit& val,
                  TeacherModel* teacher, const TrainConfig& cfg) {
    cfg.validate();
    if (cfg.use_adv && !teacher)
        throw ConfigError("adversarial loss enabled but no teacher given; train one with `teach` "
                          "or pass --no-adv");
    if (teacher && teacher->cfg.num_scenes != model.cfg.num_scenes)
        throw DimensionError("teacher emits " + std::to_string(teacher->cfg.num_scenes) +
                             " scene classes, model expects " +
                             std::to_string(model.cfg.num_scenes));
    if (train.spec.num_actions != model.cfg.num_actions)
        throw DimensionError("dataset has " + std::to_string(train.spec.num_actions) +
                             " actions, model expects " + std::to_string(model.cfg.num_actions));

    const size_t n = train.clips.size();
    if (n == 0) throw ContractError("pretrain: empty training split");

    // Teacher outputs and masked clips are fixed inputs; compute them once.
    std::vector<PseudoSceneLabel> pseudo;
    if (cfg.use_adv) {
        pseudo.reserve(n);
        for (const Clip& c : train.clips)
            pseudo.push_back(pseudo_label(*teacher, c, cfg.pseudo_mode));
    }
    std::vector<Clip> masked;
    if (cfg.use_ent) {
        masked.reserve(n);
        for (const Clip& c : train.clips) masked.push_back(mask_actor(c));
    }

    std::vector<Parameter*> phase_a_params = model.feature_params();
    for (Parameter* p : model.action_params()) phase_a_params.push_back(p);
    if (cfg.use_adv)
        for (Parameter* p : model.scene_params()) phase_a_params.push_back(p);
    std::vector<Parameter*> phase_b_params = model.feature_params();
    for (Parameter* p : model.action_params()) phase_b_params.push_back(p);

    TrainLog log;
    double lr = cfg.lr0;
    int decays = 0, no_improve = 0;
    double best_sched = std::numeric_limits<double>::infinity();
    double best_val = std::numeric_limits<double>::infinity();
    Snapshot best_snap = Snapshot::take(model);
    bool have_best = false;

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        auto t0 = std::chrono::steady_clock::now();
        Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(order);

        double ce_sum = 0.0, adv_sum = 0.0, ent_sum = 0.0;
        size_t seen = 0;
        int iter = 0;
        for (size_t start = 0; start < n; start += cfg.batch_size, ++iter) {
            size_t end = std::min(n, start + static_cast<size_t>(cfg.batch_size));
            size_t bsz = end - start;

            // Phase A: originals.
            {
                std::vector<const Clip*> batch;
                std::vector<int> labels;
                batch.reserve(bsz);
                for (size_t i = start; i < end; ++i) {
                    batch.push_back(&train.clips[static_cast<size_t>(order[i])]);
                    labels.push_back(batch.back()->action);
                }
                Tape tape;
                Val feats = features_rows_graph(tape, model, batch, true);
                Val lp_act = tape.log_softmax_rows(action_logits_rows(tape, model, feats, true));
                Val ce = tape.nll_rows(lp_act, std::move(labels));
                Val total = ce;
                if (cfg.use_adv) {
                    Tensor weights({static_cast<int>(bsz), model.cfg.num_scenes});
                    for (size_t i = start; i < end; ++i) {
                        const auto& d = pseudo[static_cast<size_t>(order[i])].dist;
                        std::copy(d.begin(), d.end(),
                                  weights.data.begin() +
                                      static_cast<size_t>(i - start) * model.cfg.num_scenes);
                    }
                    Val rev = tape.grad_reverse(feats, cfg.lambda);
                    Val lp_scene =
                        tape.log_softmax_rows(scene_logits_rows(tape, model, rev, true));
                    Val adv = tape.soft_ce_rows(lp_scene, std::move(weights));
                    adv_sum += tape.scalar_value(adv) * static_cast<double>(bsz);
                    total = tape.add(ce, adv);
                }
                double ce_v = tape.scalar_value(ce);
                check_finite_loss(ce_v, "cross-entropy loss");
                ce_sum += ce_v * static_cast<double>(bsz);
                tape.backward(total);
                sgd_step(phase_a_params, lr, cfg.momentum, cfg.weight_decay);
            }

            // Phase B: masked clips, entropy ascent on extractor + action head.
            if (cfg.use_ent) {
                std::vector<const Clip*> batch;
                batch.reserve(bsz);
                if (cfg.pairing == MaskPairing::Paired) {
                    for (size_t i = start; i < end; ++i)
                        batch.push_back(&masked[static_cast<size_t>(order[i])]);
                } else {
                    Rng pick(derive_seed(cfg.seed, "maskbatch",
                                         (static_cast<uint64_t>(epoch) << 32) |
                                             static_cast<uint64_t>(iter)));
                    for (size_t i = 0; i < bsz; ++i)
                        batch.push_back(&masked[static_cast<size_t>(pick.below(n))]);
                }
                Tape tape;
                Val ent = loss_ent_graph(tape, model, batch, true);
                double ent_v = tape.scalar_value(ent);
                check_finite_loss(ent_v, "entropy loss");
                ent_sum += ent_v * static_cast<double>(bsz);
                tape.backward(tape.scale(ent, -1.0));
                sgd_step(phase_b_params, lr, cfg.momentum, cfg.weight_decay);
            }
            seen += bsz;
        }

        double val_ce = validation_ce(model, val, cfg.batch_size);
        check_finite_loss(val_ce, "validation loss");

        EpochRecord rec;
        rec.epoch = epoch;
        rec.l_ce = ce_sum / static_cast<double>(seen);
        if (cfg.use_adv) rec.l_adv = adv_sum / static_cast<double>(seen);
        if (cfg.use_ent) rec.l_ent = ent_sum / static_cast<double>(seen);
        rec.val_ce = val_ce;
        rec.lr = lr;
        rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        log.epochs.push_back(rec);

        if (val_ce < best_val) {
            best_val = val_ce;
            best_snap = Snapshot::take(model);
            log.best_epoch = epoch;
            have_best = true;
        }

        // Plateau schedule on validation loss.
        bool improved = (best_sched - val_ce) >= 1e-4;
        best_sched = std::min(best_sched, val_ce);
        if (improved) {
            no_improve = 0;
        } else if (++no_improve >= cfg.plateau_patience) {
            if (decays < 3) {
                lr /= cfg.lr_divisor;
                ++decays;
            }
            no_improve = 0;
        }
    }

    if (have_best) {
        best_snap.restore(model);
        log.best_val_ce = best_val;
    }
    return log;
}

std::pair<DebiasModel, TrainLog> finetune(DebiasModel& source, const DatasetSplit& target_train,
                                          const DatasetSplit& target_val,
                                          const TrainConfig& cfg) {
    cfg.validate();
    ModelConfig tcfg = source.cfg;
    tcfg.num_actions = target_train.spec.num_actions;
    if (target_train.spec.frames != tcfg.frames)
        throw DimensionError("target clips have " + std::to_string(target_train.spec.frames) +
                             " frames, extractor expects " + std::to_string(tcfg.frames));

    DebiasModel model = init_model(tcfg, derive_seed(cfg.seed, "finetune-head"));
    // Keep the pretrained extractor; heads start fresh.
    auto src = source.feature_params();
    auto dst = model.feature_params();
    for (size_t i = 0; i < src.size(); ++i) dst[i]->tensor.data = src[i]->tensor.data;

    TrainConfig plain = cfg;
    plain.use_adv = false;
    plain.use_ent = false;
    TrainLog log = pretrain(model, target_train, target_val, nullptr, plain);
    return {std::move(model), std::move(log)};
}

void write_train_csv(const std::string& path, const TrainLog& log, bool with_timing) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write train log " + path);
    out << "epoch,l_ce,l_adv,l_ent,val_ce,lr,seconds\n";
    for (const EpochRecord& r : log.epochs) {
        out << r.epoch << ',' << fmt_g17(r.l_ce) << ',';
        if (r.l_adv) out << fmt_g17(*r.l_adv);
        out << ',';
        if (r.l_ent) out << fmt_g17(*r.l_ent);
        out << ',' << fmt_g17(r.val_ce) << ',' << fmt_g17(r.lr) << ',';
        if (with_timing) out << fmt_g17(r.seconds);
        out << '\n';
    }
    if (!out) throw Error("short write to train log " + path);
}

}  // namespace sblab
