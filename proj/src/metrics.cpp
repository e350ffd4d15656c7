#include "sblab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

namespace sblab {

ProbeResult linear_probe(const std::vector<std::vector<double>>& features,
                         const std::vector<int>& labels, int classes, uint64_t seed) {
    if (features.empty()) throw ContractError("linear_probe: no features");
    if (features.size() != labels.size())
        throw DimensionError("linear_probe: " + std::to_string(features.size()) +
                             " features vs " + std::to_string(labels.size()) + " labels");
    if (classes < 2) throw ContractError("linear_probe: need at least 2 classes");
    const size_t d = features[0].size();
    for (const auto& f : features)
        if (f.size() != d) throw DimensionError("linear_probe: inconsistent feature dimensions");
    std::set<int> present(labels.begin(), labels.end());
    for (int y : labels)
        if (y < 0 || y >= classes) throw ContractError("linear_probe: label out of range");
    if (present.size() < 2)
        throw ContractError("linear_probe: degenerate labels (single class present)");

    std::vector<int> order(features.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng(derive_seed(seed, "probe-split"));
    rng.shuffle(order);
    size_t train_n = features.size() * 8 / 10;
    if (train_n == 0 || train_n == features.size())
        throw ContractError("linear_probe: set too small to split 80/20");

    const int k = classes;
    std::vector<double> w(d * static_cast<size_t>(k), 0.0);
    std::vector<double> b(static_cast<size_t>(k), 0.0);
    std::vector<double> logits(static_cast<size_t>(k));
    std::vector<double> gw(w.size()), gb(b.size());

    const double lr = 0.1;
    const int iters = 500;
    const double inv_n = 1.0 / static_cast<double>(train_n);
    for (int it = 0; it < iters; ++it) {
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        for (size_t ii = 0; ii < train_n; ++ii) {
            const auto& x = features[static_cast<size_t>(order[ii])];
            int y = labels[static_cast<size_t>(order[ii])];
            for (int c = 0; c < k; ++c) {
                double s = b[static_cast<size_t>(c)];
                for (size_t j = 0; j < d; ++j) s += x[j] * w[j * k + c];
                logits[static_cast<size_t>(c)] = s;
            }
            log_softmax_inplace(logits);
            for (int c = 0; c < k; ++c) {
                double p = std::exp(logits[static_cast<size_t>(c)]);
                double g = (p - (c == y ? 1.0 : 0.0)) * inv_n;
                gb[static_cast<size_t>(c)] += g;
                for (size_t j = 0; j < d; ++j) gw[j * k + c] += g * x[j];
            }
        }
        for (size_t j = 0; j < w.size(); ++j) w[j] -= lr * gw[j];
        for (size_t j = 0; j < b.size(); ++j) b[j] -= lr * gb[j];
    }

    size_t hits = 0;
    for (size_t ii = train_n; ii < order.size(); ++ii) {
        const auto& x = features[static_cast<size_t>(order[ii])];
        int best = 0;
        double bestv = -std::numeric_limits<double>::infinity();
        for (int c = 0; c < k; ++c) {
            double s = b[static_cast<size_t>(c)];
            for (size_t j = 0; j < d; ++j) s += x[j] * w[j * k + c];
            if (s > bestv) {
                bestv = s;
                best = c;
            }
        }
        if (best == labels[static_cast<size_t>(order[ii])]) ++hits;
    }
    ProbeResult res;
    res.accuracy = static_cast<double>(hits) / static_cast<double>(order.size() - train_n);
    res.chance = 1.0 / static_cast<double>(classes);
    return res;
}

double bias_from_accuracy(double accuracy, double chance) {
    if (chance <= 0.0 || chance > 1.0) throw ContractError("bias_from_accuracy: bad chance level");
    double floored = std::max(accuracy, chance);
    return std::log(floored / chance);
}

double scene_bias(const DatasetSplit& dataset, TeacherModel& scene_rep, uint64_t seed) {
    std::vector<std::vector<double>> feats;
    std::vector<int> labels;
    feats.reserve(dataset.clips.size());
    labels.reserve(dataset.clips.size());
    for (const Clip& c : dataset.clips) {
        feats.push_back(teacher_features(scene_rep, c));
        labels.push_back(c.action);
    }
    ProbeResult probe = linear_probe(feats, labels, dataset.spec.num_actions, seed);
    return bias_from_accuracy(probe.accuracy, probe.chance);
}

TransferResult transfer_eval(DebiasModel& checkpoint, const DatasetSpec& target_spec,
                             TransferMode mode, const TrainConfig& cfg) {
    target_spec.validate();
    TransferResult res;
    res.chance = 1.0 / static_cast<double>(target_spec.num_actions);
    if (target_spec.family == ActionFamily::Cardinal)
        res.warning = "target uses the cardinal action family; transfer normally targets novel "
                      "(diagonal) classes";

    DatasetSpec train_spec = target_spec;
    DatasetSplit ttrain = generate_dataset(train_spec, Role::Train);
    if (mode == TransferMode::FrozenProbe) {
        std::vector<std::vector<double>> feats;
        std::vector<int> labels;
        feats.reserve(ttrain.clips.size());
        for (const Clip& c : ttrain.clips) {
            feats.push_back(extract_features(checkpoint, c));
            labels.push_back(c.action);
        }
        ProbeResult probe =
            linear_probe(feats, labels, target_spec.num_actions, derive_seed(cfg.seed, "transfer"));
        res.accuracy = probe.accuracy;
        return res;
    }

    DatasetSpec val_spec = target_spec;
    val_spec.count = std::max(1, target_spec.count / 4);
    DatasetSpec test_spec = val_spec;
    DatasetSplit tval = generate_dataset(val_spec, Role::Val);
    DatasetSplit ttest = generate_dataset(test_spec, Role::Test);
    auto [tuned, log] = finetune(checkpoint, ttrain, tval, cfg);
    res.accuracy = action_accuracy(tuned, ttest.clips);
    return res;
}

PearsonResult pearson(const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) throw ContractError("pearson: unequal lengths");
    if (x.size() < 3) throw ContractError("pearson: need at least 3 points");
    const double n = static_cast<double>(x.size());
    double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
    double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
    double sxx = 0.0, syy = 0.0, sxy = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        double dx = x[i] - mx, dy = y[i] - my;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if (sxx == 0.0 || syy == 0.0)
        throw ContractError("pearson: correlation undefined for zero-variance input");
    PearsonResult r;
    r.n = static_cast<int>(x.size());
    r.rho = sxy / std::sqrt(sxx * syy);
    double denom = 1.0 - r.rho * r.rho;
    r.t_statistic = denom <= 0.0
                        ? std::copysign(std::numeric_limits<double>::infinity(), r.rho)
                        : r.rho * std::sqrt((n - 2.0) / denom);
    return r;
}

BiasReport bias_sweep(const SweepConfig& cfg) {
    if (cfg.target_betas.size() < 3)
        throw ContractError("bias_sweep: need at least 3 target betas for a correlation");
    cfg.source.validate();

    // Teacher for the source pseudo labels, then the two pretrained models.
    DatasetSpec val_spec = cfg.source;
    val_spec.count = std::max(1, cfg.source.count / 4);
    DatasetSplit strain = generate_dataset(cfg.source, Role::Train);
    DatasetSplit sval = generate_dataset(val_spec, Role::Val);
    TeacherTrainConfig tcfg;
    tcfg.epochs = cfg.teacher_epochs;
    tcfg.lr = cfg.teacher_lr;
    tcfg.seed = derive_seed(cfg.seed, "sweep-teacher");
    TeacherModel teacher = train_teacher(strain, tcfg);

    ModelConfig mcfg;
    mcfg.num_actions = cfg.source.num_actions;
    mcfg.num_scenes = cfg.source.num_scenes;
    mcfg.frames = cfg.source.frames;

    TrainConfig base_cfg = cfg.pretrain_cfg;
    base_cfg.use_adv = false;
    base_cfg.use_ent = false;
    base_cfg.seed = derive_seed(cfg.seed, "sweep-baseline");
    DebiasModel baseline = init_model(mcfg, base_cfg.seed);
    pretrain(baseline, strain, sval, nullptr, base_cfg);

    TrainConfig deb_cfg = cfg.pretrain_cfg;
    deb_cfg.use_adv = true;
    deb_cfg.use_ent = true;
    deb_cfg.seed = derive_seed(cfg.seed, "sweep-debiased");
    DebiasModel debiased = init_model(mcfg, deb_cfg.seed);
    pretrain(debiased, strain, sval, &teacher, deb_cfg);

    BiasReport report;
    std::vector<double> xs, ys;
    for (size_t bi = 0; bi < cfg.target_betas.size(); ++bi) {
        double beta = cfg.target_betas[bi];
        DatasetSpec target = cfg.source;
        target.family = ActionFamily::Diagonal;
        target.bias = beta;
        target.count = cfg.target_count;
        target.seed = derive_seed(cfg.seed, "sweep-target", bi);

        DatasetSplit ttrain = generate_dataset(target, Role::Train);
        TeacherTrainConfig ttc = tcfg;
        ttc.seed = derive_seed(cfg.seed, "sweep-target-teacher", bi);
        TeacherModel target_teacher = train_teacher(ttrain, ttc);
        double b_scene =
            scene_bias(ttrain, target_teacher, derive_seed(cfg.seed, "sweep-bias-probe", bi));

        TrainConfig ft = cfg.finetune_cfg;
        ft.seed = derive_seed(cfg.seed, "sweep-ft-baseline", bi);
        TransferResult acc_base = transfer_eval(baseline, target, cfg.mode, ft);
        ft.seed = derive_seed(cfg.seed, "sweep-ft-debiased", bi);
        TransferResult acc_deb = transfer_eval(debiased, target, cfg.mode, ft);

        BiasReportRow row;
        std::ostringstream id;
        id << family_name(target.family) << "-b" << fmt_g17(beta);
        row.dataset = id.str();
        row.beta = beta;
        row.b_scene = b_scene;
        row.acc_baseline = acc_base.accuracy;
        row.acc_debiased = acc_deb.accuracy;
        if (acc_base.accuracy <= 0.0)
            throw NumericError("bias_sweep: baseline accuracy is zero; relative improvement "
                               "undefined");
        row.rel_improvement = (acc_deb.accuracy - acc_base.accuracy) / acc_base.accuracy;
        report.rows.push_back(row);
        xs.push_back(b_scene);
        ys.push_back(row.rel_improvement);
    }
    report.summary = pearson(xs, ys);
    return report;
}

void write_bias_report_csv(const std::string& path, const BiasReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write bias report " + path);
    out << "dataset,beta,b_scene,acc_baseline,acc_debiased,rel_improvement\n";
    for (const auto& r : report.rows)
        out << r.dataset << ',' << fmt_g17(r.beta) << ',' << fmt_g17(r.b_scene) << ','
            << fmt_g17(r.acc_baseline) << ',' << fmt_g17(r.acc_debiased) << ','
            << fmt_g17(r.rel_improvement) << '\n';
    out << "# rho=" << fmt_g17(report.summary.rho) << " t=" << fmt_g17(report.summary.t_statistic)
        << " n=" << report.summary.n << '\n';
    if (!out) throw Error("short write to bias report " + path);
}

void write_bias_report_gnuplot(const std::string& path, const BiasReport& report) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write gnuplot file " + path);
    for (const auto& r : report.rows)
        out << fmt_g17(r.b_scene) << ' ' << fmt_g17(r.rel_improvement) << '\n';
    if (!out) throw Error("short write to gnuplot file " + path);
}

BiasReport read_bias_report_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataFormatError("cannot open bias report " + path);
    std::string line;
    if (!std::getline(in, line) ||
        line != "dataset,beta,b_scene,acc_baseline,acc_debiased,rel_improvement")
        throw DataFormatError("bad bias report header in " + path);
    BiasReport report;
    bool have_summary = false;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        if (line.rfind("# rho=", 0) == 0) {
            std::istringstream ss(line.substr(2));
            std::string tok;
            while (ss >> tok) {
                auto eq = tok.find('=');
                if (eq == std::string::npos) continue;
                std::string key = tok.substr(0, eq);
                double v = std::stod(tok.substr(eq + 1));
                if (key == "rho") report.summary.rho = v;
                else if (key == "t") report.summary.t_statistic = v;
                else if (key == "n") report.summary.n = static_cast<int>(v);
            }
            have_summary = true;
            continue;
        }
        std::istringstream ss(line);
        BiasReportRow row;
        std::string field;
        if (!std::getline(ss, row.dataset, ',')) throw DataFormatError("bad row in " + path);
        auto next = [&](double& dst) {
            if (!std::getline(ss, field, ',')) throw DataFormatError("bad row in " + path);
            dst = std::stod(field);
        };
        next(row.beta);
        next(row.b_scene);
        next(row.acc_baseline);
        next(row.acc_debiased);
        next(row.rel_improvement);
        report.rows.push_back(row);
    }
    if (!have_summary) throw DataFormatError("bias report " + path + " is missing its summary");
    return report;
}

}  // namespace sblab
