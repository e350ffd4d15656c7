#include "sblab/teacher.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "sblab/checkpoint.hpp"

namespace sblab {

TeacherModel init_teacher(const TeacherConfig& cfg, uint64_t seed) {
    if (cfg.channels < 1 || cfg.kernel < 1 || cfg.num_scenes < 1)
        throw ConfigError("teacher config dimensions must be positive");
    TeacherModel t;
    t.cfg = cfg;
    t.conv_w = Parameter("conv.w", Tensor({cfg.channels, 1, cfg.kernel, cfg.kernel}));
    t.conv_b = Parameter("conv.b", Tensor({cfg.channels}));
    t.head_w = Parameter("head.w", Tensor({cfg.channels, cfg.num_scenes}));
    t.head_b = Parameter("head.b", Tensor({cfg.num_scenes}));
    glorot_init(t.conv_w, cfg.kernel * cfg.kernel, cfg.channels * cfg.kernel * cfg.kernel,
                derive_seed(seed, "teacher.conv.w"));
    glorot_init(t.head_w, cfg.channels, cfg.num_scenes, derive_seed(seed, "teacher.head.w"));
    t.digest = "init";
    return t;
}

namespace {

Tensor frame_tensor(const Clip& clip, int t) {
    Tensor f({1, clip.height, clip.width});
    const size_t n = static_cast<size_t>(clip.height) * clip.width;
    std::copy_n(clip.pixels.begin() + static_cast<size_t>(t) * n, n, f.data.begin());
    return f;
}

}  // namespace

Val teacher_pooled_graph(Tape& tape, TeacherModel& teacher, const Clip& clip, bool track) {
    if (clip.height < teacher.cfg.kernel || clip.width < teacher.cfg.kernel)
        throw DimensionError("clip smaller than teacher conv kernel");
    Val cw = track ? tape.leaf(teacher.conv_w) : tape.constant(teacher.conv_w.tensor);
    Val cb = track ? tape.leaf(teacher.conv_b) : tape.constant(teacher.conv_b.tensor);
    Val acc{-1};
    for (int t = 0; t < clip.frames; ++t) {
        Val pooled = tape.mean_hw(
            tape.relu(tape.conv2d(tape.constant(frame_tensor(clip, t)), cw, cb)));
        acc = t == 0 ? pooled : tape.add(acc, pooled);
    }
    return tape.scale(acc, 1.0 / clip.frames);
}

namespace {

Val teacher_logits_rows(Tape& tape, TeacherModel& teacher, std::span<const Clip* const> batch,
                        bool track) {
    std::vector<Val> rows;
    rows.reserve(batch.size());
    for (const Clip* c : batch) rows.push_back(teacher_pooled_graph(tape, teacher, *c, track));
    Val feats = tape.stack_rows(rows);
    Val hw = track ? tape.leaf(teacher.head_w) : tape.constant(teacher.head_w.tensor);
    Val hb = track ? tape.leaf(teacher.head_b) : tape.constant(teacher.head_b.tensor);
    return tape.add_rowvec(tape.matmul(feats, hw), hb);
}

}  // namespace

std::vector<double> teacher_features(TeacherModel& teacher, const Clip& clip) {
    Tape tape;
    return tape.value(teacher_pooled_graph(tape, teacher, clip, false)).data;
}

std::vector<double> teacher_logits(TeacherModel& teacher, const Clip& clip) {
    Tape tape;
    const Clip* ptr = &clip;
    Val logits = teacher_logits_rows(tape, teacher, std::span<const Clip* const>(&ptr, 1), false);
    return tape.value(logits).data;
}

PseudoSceneLabel pseudo_label(TeacherModel& teacher, const Clip& clip, PseudoMode mode) {
    std::vector<double> logits = teacher_logits(teacher, clip);
    log_softmax_inplace(logits);
    PseudoSceneLabel out;
    if (mode == PseudoMode::Soft) {
        out.dist.resize(logits.size());
        for (size_t i = 0; i < logits.size(); ++i) out.dist[i] = std::exp(logits[i]);
    } else {
        size_t best = 0;
        for (size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;  // ties stay at the lowest index
        out.dist.assign(logits.size(), 0.0);
        out.dist[best] = 1.0;
    }
    return out;
}

double teacher_scene_accuracy(TeacherModel& teacher, std::span<const Clip> clips) {
    if (clips.empty()) throw ContractError("teacher_scene_accuracy: no clips");
    size_t hits = 0;
    for (const Clip& c : clips) {
        std::vector<double> logits = teacher_logits(teacher, c);
        size_t best = 0;
        for (size_t i = 1; i < logits.size(); ++i)
            if (logits[i] > logits[best]) best = i;
        if (static_cast<int>(best) == c.scene) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(clips.size());
}

TeacherModel train_teacher(const DatasetSplit& data, const TeacherTrainConfig& cfg) {
    if (data.clips.empty()) throw ContractError("train_teacher: empty dataset");
    TeacherConfig tcfg;
    tcfg.num_scenes = data.spec.num_scenes;
    TeacherModel teacher = init_teacher(tcfg, derive_seed(cfg.seed, "teacher-init"));

    // Seeded 80/20 holdout for the digest accuracy.
    std::vector<int> order(data.clips.size());
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(derive_seed(cfg.seed, "teacher-split"));
    split_rng.shuffle(order);
    size_t train_n = std::max<size_t>(1, order.size() * 8 / 10);
    std::vector<int> train_idx(order.begin(), order.begin() + train_n);
    std::vector<Clip> holdout;
    for (size_t i = train_n; i < order.size(); ++i)
        holdout.push_back(data.clips[static_cast<size_t>(order[i])]);

    auto params = teacher.params();
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(cfg.seed, "teacher-shuffle", static_cast<uint64_t>(epoch)));
        shuffle_rng.shuffle(train_idx);
        for (size_t start = 0; start < train_idx.size(); start += cfg.batch_size) {
            size_t end = std::min(train_idx.size(), start + cfg.batch_size);
            std::vector<const Clip*> batch;
            std::vector<int> labels;
            for (size_t i = start; i < end; ++i) {
                const Clip& c = data.clips[static_cast<size_t>(train_idx[i])];
                batch.push_back(&c);
                labels.push_back(c.scene);
            }
            Tape tape;
            Val logits = teacher_logits_rows(tape, teacher, batch, true);
            Val loss = tape.nll_rows(tape.log_softmax_rows(logits), std::move(labels));
            tape.backward(loss);
            sgd_step(params, cfg.lr, cfg.momentum, 0.0);
        }
    }

    double acc = holdout.empty() ? 0.0 : teacher_scene_accuracy(teacher, holdout);
    std::ostringstream d;
    d << "epochs=" << cfg.epochs << " lr=" << fmt_g17(cfg.lr) << " seed=" << cfg.seed
      << " holdout_scene_acc=" << fmt_g17(acc);
    teacher.digest = d.str();
    return teacher;
}

TeacherModel train_teacher(const DatasetSplit& data, int epochs, double lr, uint64_t seed) {
    TeacherTrainConfig cfg;
    cfg.epochs = epochs;
    cfg.lr = lr;
    cfg.seed = seed;
    return train_teacher(data, cfg);
}

void save_teacher(const std::string& path, TeacherModel& teacher) {
    auto params = teacher.params();
    std::vector<const Parameter*> cp(params.begin(), params.end());
    write_checkpoint(path, cp);
}

TeacherModel load_teacher(const std::string& path) {
    auto records = read_checkpoint(path);
    const Tensor& conv_w = find_record(records, "conv.w").tensor;
    const Tensor& head_w = find_record(records, "head.w").tensor;
    if (conv_w.rank() != 4 || conv_w.shape[1] != 1 || conv_w.shape[2] != conv_w.shape[3] ||
        head_w.rank() != 2 || head_w.shape[0] != conv_w.shape[0])
        throw DataFormatError("teacher checkpoint " + path + " has unexpected shapes");
    // A debias-model checkpoint also carries conv.w; reject it explicitly.
    for (const auto& r : records)
        if (r.name == "scene1.w")
            throw DataFormatError(path + " is a model checkpoint, not a teacher checkpoint");
    TeacherConfig cfg;
    cfg.channels = conv_w.shape[0];
    cfg.kernel = conv_w.shape[2];
    cfg.num_scenes = head_w.shape[1];
    TeacherModel t = init_teacher(cfg, 0);
    for (Parameter* p : t.params()) {
        const Tensor& rec = find_record(records, p->name).tensor;
        if (rec.shape != p->tensor.shape)
            throw DataFormatError("teacher checkpoint " + path + ": record '" + p->name +
                                  "' has shape " + shape_str(rec.shape));
        p->tensor.data = rec.data;
        p->tensor.grad.reset();
        std::fill(p->momentum.begin(), p->momentum.end(), 0.0);
    }
    t.digest = "loaded:" + path;
    return t;
}

}  // namespace sblab
