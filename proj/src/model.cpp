#include "sblab/model.hpp"

#include <algorithm>
#include <cmath>

#include "sblab/checkpoint.hpp"

namespace sblab {

void ModelConfig::validate() const {
    if (conv_channels < 1 || kernel < 1 || feature_dim < 1 || hidden < 1 || num_actions < 1 ||
        num_scenes < 1)
        throw ConfigError("model config dimensions must be positive");
    if (frames < 3) throw ConfigError("model needs at least 3 frames for lag-2 differencing");
}

std::vector<Parameter*> DebiasModel::feature_params() {
    return {&conv_w, &conv_b, &fc_w, &fc_b};
}
std::vector<Parameter*> DebiasModel::action_params() { return {&act_w, &act_b}; }
std::vector<Parameter*> DebiasModel::scene_params() {
    return {&s1_w, &s1_b, &s2_w, &s2_b, &s3_w, &s3_b, &s4_w, &s4_b};
}
std::vector<Parameter*> DebiasModel::all_params() {
    std::vector<Parameter*> all = feature_params();
    for (Parameter* p : action_params()) all.push_back(p);
    for (Parameter* p : scene_params()) all.push_back(p);
    return all;
}

DebiasModel init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    const int C = cfg.conv_channels, K = cfg.kernel, F = cfg.feature_dim, H = cfg.hidden;
    const int N = cfg.num_actions, M = cfg.num_scenes, P = cfg.pooled_dim();
    DebiasModel m;
    m.cfg = cfg;
    m.conv_w = Parameter("conv.w", Tensor({C, 1, K, K}));
    m.conv_b = Parameter("conv.b", Tensor({C}));
    m.fc_w = Parameter("fc.w", Tensor({P, F}));
    m.fc_b = Parameter("fc.b", Tensor({F}));
    m.act_w = Parameter("action.w", Tensor({F, N}));
    m.act_b = Parameter("action.b", Tensor({N}));
    m.s1_w = Parameter("scene1.w", Tensor({F, H}));
    m.s1_b = Parameter("scene1.b", Tensor({H}));
    m.s2_w = Parameter("scene2.w", Tensor({H, H}));
    m.s2_b = Parameter("scene2.b", Tensor({H}));
    m.s3_w = Parameter("scene3.w", Tensor({H, H}));
    m.s3_b = Parameter("scene3.b", Tensor({H}));
    m.s4_w = Parameter("scene4.w", Tensor({H, M}));
    m.s4_b = Parameter("scene4.b", Tensor({M}));

    glorot_init(m.conv_w, K * K, C * K * K, derive_seed(seed, "conv.w"));
    glorot_init(m.fc_w, P, F, derive_seed(seed, "fc.w"));
    glorot_init(m.act_w, F, N, derive_seed(seed, "action.w"));
    glorot_init(m.s1_w, F, H, derive_seed(seed, "scene1.w"));
    glorot_init(m.s2_w, H, H, derive_seed(seed, "scene2.w"));
    glorot_init(m.s3_w, H, H, derive_seed(seed, "scene3.w"));
    glorot_init(m.s4_w, H, M, derive_seed(seed, "scene4.w"));
    return m;
}

namespace {

Val param_val(Tape& t, Parameter& p, bool track) {
    return track ? t.leaf(p) : t.constant(p.tensor);
}

Tensor frame_tensor(const Clip& clip, int t) {
    Tensor f({1, clip.height, clip.width});
    const size_t n = static_cast<size_t>(clip.height) * clip.width;
    std::copy_n(clip.pixels.begin() + static_cast<size_t>(t) * n, n, f.data.begin());
    return f;
}

void check_clip_dims(const ModelConfig& cfg, const Clip& clip) {
    if (clip.frames != cfg.frames)
        throw DimensionError("clip has " + std::to_string(clip.frames) + " frames, model expects " +
                             std::to_string(cfg.frames));
    if (clip.height < cfg.kernel || clip.width < cfg.kernel)
        throw DimensionError("clip smaller than conv kernel");
}

// y = relu(x W + b) rows.
Val linear_relu_rows(Tape& t, Val x, Val w, Val b) {
    return t.relu(t.add_rowvec(t.matmul(x, w), b));
}

}  // namespace

FeatureGraph extract_features_graph(Tape& tape, DebiasModel& model, const Clip& clip,
                                    bool track) {
    check_clip_dims(model.cfg, clip);
    const int T = model.cfg.frames;
    Val cw = param_val(tape, model.conv_w, track);
    Val cb = param_val(tape, model.conv_b, track);
    Val fw = param_val(tape, model.fc_w, track);
    Val fb = param_val(tape, model.fc_b, track);

    std::vector<Val> conv_maps;
    conv_maps.reserve(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t)
        conv_maps.push_back(tape.conv2d(tape.constant(frame_tensor(clip, t)), cw, cb));

    FeatureGraph fg;
    std::vector<Val> pooled;
    pooled.reserve(static_cast<size_t>(T - 2));
    for (int t = 0; t + 2 < T; ++t) {
        Val diff = tape.relu(tape.sub(conv_maps[static_cast<size_t>(t) + 2],
                                      conv_maps[static_cast<size_t>(t)]));
        fg.diff_maps.push_back(diff);
        pooled.push_back(tape.mean_hw(diff));
    }
    Val flat = tape.concat1d(pooled);                               // [P]
    Val row = tape.reshape(flat, {1, model.cfg.pooled_dim()});      // [1,P]
    Val feat_row = linear_relu_rows(tape, row, fw, fb);             // [1,F]
    fg.features = tape.reshape(feat_row, {model.cfg.feature_dim});  // [F]
    return fg;
}

Val features_rows_graph(Tape& tape, DebiasModel& model, std::span<const Clip* const> batch,
                        bool track) {
    if (batch.empty()) throw ContractError("empty batch");
    std::vector<Val> rows;
    rows.reserve(batch.size());
    for (const Clip* c : batch)
        rows.push_back(extract_features_graph(tape, model, *c, track).features);
    return tape.stack_rows(rows);
}

Val action_logits_rows(Tape& tape, DebiasModel& model, Val features_rows, bool track) {
    Val w = param_val(tape, model.act_w, track);
    Val b = param_val(tape, model.act_b, track);
    return tape.add_rowvec(tape.matmul(features_rows, w), b);
}

Val scene_logits_rows(Tape& tape, DebiasModel& model, Val features_rows, bool track) {
    Val h1 = linear_relu_rows(tape, features_rows, param_val(tape, model.s1_w, track),
                              param_val(tape, model.s1_b, track));
    Val h2 = linear_relu_rows(tape, h1, param_val(tape, model.s2_w, track),
                              param_val(tape, model.s2_b, track));
    Val h3 = linear_relu_rows(tape, h2, param_val(tape, model.s3_w, track),
                              param_val(tape, model.s3_b, track));
    return tape.add_rowvec(tape.matmul(h3, param_val(tape, model.s4_w, track)),
                           param_val(tape, model.s4_b, track));
}

std::vector<double> extract_features(DebiasModel& model, const Clip& clip) {
    Tape tape;
    FeatureGraph fg = extract_features_graph(tape, model, clip, false);
    return tape.value(fg.features).data;
}

Val loss_ce_graph(Tape& tape, DebiasModel& model, std::span<const Clip* const> batch,
                  bool track) {
    Val feats = features_rows_graph(tape, model, batch, track);
    Val lp = tape.log_softmax_rows(action_logits_rows(tape, model, feats, track));
    std::vector<int> labels;
    labels.reserve(batch.size());
    for (const Clip* c : batch) labels.push_back(c->action);
    return tape.nll_rows(lp, std::move(labels));
}

Val loss_adv_graph(Tape& tape, DebiasModel& model, std::span<const Clip* const> batch,
                   std::span<const PseudoSceneLabel* const> pseudo, double lambda,
                   bool with_reversal, bool track) {
    if (pseudo.size() != batch.size())
        throw DimensionError("loss_adv: pseudo labels (" + std::to_string(pseudo.size()) +
                             ") not aligned with batch (" + std::to_string(batch.size()) + ")");
    const int M = model.cfg.num_scenes;
    Tensor weights({static_cast<int>(batch.size()), M});
    for (size_t i = 0; i < pseudo.size(); ++i) {
        if (static_cast<int>(pseudo[i]->dist.size()) != M)
            throw DimensionError("loss_adv: pseudo label has " +
                                 std::to_string(pseudo[i]->dist.size()) + " scenes, model expects " +
                                 std::to_string(M));
        std::copy(pseudo[i]->dist.begin(), pseudo[i]->dist.end(),
                  weights.data.begin() + static_cast<size_t>(i) * M);
    }
    Val feats = features_rows_graph(tape, model, batch, track);
    if (with_reversal) feats = tape.grad_reverse(feats, lambda);
    Val lp = tape.log_softmax_rows(scene_logits_rows(tape, model, feats, track));
    return tape.soft_ce_rows(lp, std::move(weights));
}

Val loss_ent_graph(Tape& tape, DebiasModel& model, std::span<const Clip* const> batch,
                   bool track) {
    Val feats = features_rows_graph(tape, model, batch, track);
    Val lp = tape.log_softmax_rows(action_logits_rows(tape, model, feats, track));
    return tape.entropy_rows(lp);
}

namespace {

std::vector<const Clip*> clip_ptrs(std::span<const Clip> batch) {
    std::vector<const Clip*> ptrs;
    ptrs.reserve(batch.size());
    for (const Clip& c : batch) ptrs.push_back(&c);
    return ptrs;
}

}  // namespace

double loss_ce(DebiasModel& model, std::span<const Clip> batch) {
    Tape tape;
    auto ptrs = clip_ptrs(batch);
    return tape.scalar_value(loss_ce_graph(tape, model, ptrs, false));
}

double loss_adv(DebiasModel& model, std::span<const Clip> batch,
                std::span<const PseudoSceneLabel> pseudo, double lambda) {
    Tape tape;
    auto ptrs = clip_ptrs(batch);
    std::vector<const PseudoSceneLabel*> pp;
    pp.reserve(pseudo.size());
    for (const PseudoSceneLabel& p : pseudo) pp.push_back(&p);
    return tape.scalar_value(loss_adv_graph(tape, model, ptrs, pp, lambda, true, false));
}

double loss_ent(DebiasModel& model, std::span<const Clip> batch) {
    Tape tape;
    auto ptrs = clip_ptrs(batch);
    return tape.scalar_value(loss_ent_graph(tape, model, ptrs, false));
}

double action_accuracy(DebiasModel& model, std::span<const Clip> clips) {
    if (clips.empty()) throw ContractError("action_accuracy: no clips");
    size_t hits = 0;
    for (const Clip& c : clips) {
        Tape tape;
        const Clip* ptr = &c;
        Val feats = features_rows_graph(tape, model, std::span<const Clip* const>(&ptr, 1), false);
        const Tensor& logits = tape.value(action_logits_rows(tape, model, feats, false));
        int best = 0;
        for (int k = 1; k < logits.shape[1]; ++k)
            if (logits.at(0, k) > logits.at(0, best)) best = k;
        if (best == c.action) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(clips.size());
}

Tensor cam(DebiasModel& model, const Clip& clip, int class_index) {
    const ModelConfig& cfg = model.cfg;
    if (class_index < 0 || class_index >= cfg.num_actions)
        throw ContractError("cam: class index " + std::to_string(class_index) + " out of [0," +
                            std::to_string(cfg.num_actions) + ")");
    Tape tape;
    FeatureGraph fg = extract_features_graph(tape, model, clip, false);

    // Effective pooled->logit weights: fc_w [P,F] . act_w [F,N], column k.
    const int P = cfg.pooled_dim(), F = cfg.feature_dim, C = cfg.conv_channels;
    std::vector<double> eff(static_cast<size_t>(P), 0.0);
    for (int p = 0; p < P; ++p) {
        double s = 0.0;
        for (int f = 0; f < F; ++f)
            s += model.fc_w.tensor.at(p, f) * model.act_w.tensor.at(f, class_index);
        eff[static_cast<size_t>(p)] = s;
    }
    // Collapse time: channel weight = sum over diff-map slots of that channel.
    std::vector<double> wchan(static_cast<size_t>(C), 0.0);
    const int steps = static_cast<int>(fg.diff_maps.size());
    for (int t = 0; t < steps; ++t)
        for (int c = 0; c < C; ++c) wchan[static_cast<size_t>(c)] += eff[static_cast<size_t>(t) * C + c];

    const Tensor& first = tape.value(fg.diff_maps[0]);
    const int oh = first.shape[1], ow = first.shape[2];
    Tensor heat({oh, ow});
    double tinv = 1.0 / static_cast<double>(steps);
    for (int t = 0; t < steps; ++t) {
        const Tensor& m = tape.value(fg.diff_maps[static_cast<size_t>(t)]);
        for (int c = 0; c < C; ++c) {
            double w = wchan[static_cast<size_t>(c)] * tinv;
            const double* src = m.data.data() + static_cast<size_t>(c) * oh * ow;
            for (int i = 0; i < oh * ow; ++i) heat.data[static_cast<size_t>(i)] += w * src[i];
        }
    }
    double lo = *std::min_element(heat.data.begin(), heat.data.end());
    double hi = *std::max_element(heat.data.begin(), heat.data.end());
    if (hi - lo <= 0.0) {
        std::fill(heat.data.begin(), heat.data.end(), 0.0);
    } else {
        for (double& v : heat.data) v = (v - lo) / (hi - lo);
    }
    return heat;
}

void save_model(const std::string& path, DebiasModel& model) {
    auto params = model.all_params();
    std::vector<const Parameter*> cp(params.begin(), params.end());
    write_checkpoint(path, cp);
}

DebiasModel load_model(const std::string& path) {
    auto records = read_checkpoint(path);
    const Tensor& conv_w = find_record(records, "conv.w").tensor;
    const Tensor& fc_w = find_record(records, "fc.w").tensor;
    const Tensor& act_w = find_record(records, "action.w").tensor;
    const Tensor& s1_w = find_record(records, "scene1.w").tensor;
    const Tensor& s4_w = find_record(records, "scene4.w").tensor;
    if (conv_w.rank() != 4 || conv_w.shape[1] != 1 || conv_w.shape[2] != conv_w.shape[3])
        throw DataFormatError("model checkpoint " + path + ": unexpected conv.w shape " +
                              shape_str(conv_w.shape));
    if (fc_w.rank() != 2 || act_w.rank() != 2 || s1_w.rank() != 2 || s4_w.rank() != 2)
        throw DataFormatError("model checkpoint " + path + ": unexpected linear shapes");
    ModelConfig cfg;
    cfg.conv_channels = conv_w.shape[0];
    cfg.kernel = conv_w.shape[2];
    cfg.feature_dim = fc_w.shape[1];
    cfg.hidden = s1_w.shape[1];
    cfg.num_actions = act_w.shape[1];
    cfg.num_scenes = s4_w.shape[1];
    if (fc_w.shape[0] % cfg.conv_channels != 0)
        throw DataFormatError("model checkpoint " + path + ": fc.w rows not divisible by channels");
    cfg.frames = fc_w.shape[0] / cfg.conv_channels + 2;
    cfg.validate();

    DebiasModel m = init_model(cfg, 0);
    for (Parameter* p : m.all_params()) {
        const Tensor& rec = find_record(records, p->name).tensor;
        if (rec.shape != p->tensor.shape)
            throw DataFormatError("model checkpoint " + path + ": record '" + p->name +
                                  "' has shape " + shape_str(rec.shape) + ", expected " +
                                  shape_str(p->tensor.shape));
        p->tensor.data = rec.data;
        p->tensor.grad.reset();
        std::fill(p->momentum.begin(), p->momentum.end(), 0.0);
    }
    return m;
}

}  // namespace sblab
