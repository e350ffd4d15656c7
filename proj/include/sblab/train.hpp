#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "sblab/data.hpp"
#include "sblab/model.hpp"
#include "sblab/teacher.hpp"

namespace sblab {

enum class MaskPairing { Paired, Independent };

struct TrainConfig {
    double lr0 = 0.001;
    double momentum = 0.9;
    double weight_decay = 1e-5;
    double lambda = 0.5;
    int epochs = 30;
    int batch_size = 32;
    int plateau_patience = 3;
    double lr_divisor = 10.0;
    bool use_adv = true;
    bool use_ent = true;
    PseudoMode pseudo_mode = PseudoMode::Soft;
    MaskPairing pairing = MaskPairing::Paired;
    uint64_t seed = 0;

    void validate() const;
};

struct EpochRecord {
    int epoch = 0;
    double l_ce = 0.0;
    std::optional<double> l_adv;
    std::optional<double> l_ent;
    double val_ce = 0.0;
    double lr = 0.0;
    double seconds = 0.0;  // wall time; emitted to CSV only on request
};

struct TrainLog {
    std::vector<EpochRecord> epochs;
    int best_epoch = -1;
    double best_val_ce = 0.0;
};

// Alternating optimization. Per iteration: (A) one step on
// L_CE [+ L_Adv through the gradient reversal layer] over an original batch,
// stepping every parameter in that graph; (B) if enabled, one step on -L_Ent
// over the matching masked batch, stepping the feature extractor and action
// head only. The learning rate divides by lr_divisor (at most 3 times) when
// validation L_CE fails to improve by 1e-4 for plateau_patience consecutive
// epochs. The model is left at the epoch snapshot with the lowest validation
// L_CE.
TrainLog pretrain(DebiasModel& model, const DatasetSplit& train, const DatasetSplit& val,
                  TeacherModel* teacher, const TrainConfig& cfg);

// Drops the scene head, attaches a freshly initialized action head for the
// target label set and trains extractor + head with plain cross-entropy.
std::pair<DebiasModel, TrainLog> finetune(DebiasModel& source, const DatasetSplit& target_train,
                                          const DatasetSplit& target_val, const TrainConfig& cfg);

// Mean cross-entropy over a whole split, batched, gradient-free.
double validation_ce(DebiasModel& model, const DatasetSplit& split, int batch_size);

// CSV: epoch,l_ce,l_adv,l_ent,val_ce,lr,seconds. Disabled losses emit empty
// cells; the seconds column is empty unless with_timing is set (timing is
// the one non-reproducible field).
void write_train_csv(const std::string& path, const TrainLog& log, bool with_timing);

}  // namespace sblab
