// Acceptance suite: one pass/fail line per criterion, nonzero exit if any
// criterion fails. Heavier end-to-end runs share one set of trained
// pipelines across criteria 4-6.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lmd/harness.hpp"

using namespace lmd;

namespace {

namespace fs = std::filesystem;

struct Criterion {
    int id;
    bool pass;
    std::string detail;
};

std::vector<Criterion> g_results;

void record(int id, bool pass, const std::string& detail) {
    g_results.push_back({id, pass, detail});
    std::printf("[%s] criterion %d: %s\n", pass ? "PASS" : "FAIL", id, detail.c_str());
    std::fflush(stdout);
}

double now_seconds(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(double v, int prec = 4) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", prec, v);
    return buf;
}

// ============================================================
// Criterion 1: finite-difference gradient checks
// ============================================================

// Max relative error of `analytic` against central differences at
// `probes` random coordinates of `param`.
double fd_check(Tensor& param, const std::vector<double>& analytic,
                const std::function<double()>& loss_fn, int probes, Rng& rng,
                double h = 1e-5) {
    double worst = 0.0;
    for (int p = 0; p < probes; ++p) {
        const auto i = static_cast<std::size_t>(rng.below(param.data.size()));
        const double saved = param.data[i];
        param.data[i] = saved + h;
        const double up = loss_fn();
        param.data[i] = saved - h;
        const double down = loss_fn();
        param.data[i] = saved;
        const double fd = (up - down) / (2.0 * h);
        const double got = analytic[i];
        const double denom = std::max(std::abs(fd), std::abs(got));
        if (denom < 1e-8) continue;
        worst = std::max(worst, std::abs(fd - got) / denom);
    }
    return worst;
}

Tensor random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (auto& v : t.data) v = scale * rng.normal();
    return t;
}

void criterion_gradients() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(20240817);
    double worst = 0.0;
    std::string worst_op = "none";
    auto track = [&](const char* op, double err) {
        if (err > worst) {
            worst = err;
            worst_op = op;
        }
    };

    // 100 probe points per op, spread over re-randomized inputs.
    for (int rep = 0; rep < 10; ++rep) {
        {
            Tensor a = random_tensor({4, 3}, rng);
            const Tensor b = random_tensor({3, 5}, rng);
            Graph g;
            g.backward(g.sum(g.matmul(g.param(a), g.constant(b))));
            track("matmul", fd_check(a, a.grad, [&] {
                double s = 0.0;
                for (double v : matmul(a, b).data) s += v;
                return s;
            }, 10, rng));
        }
        {
            Tensor z = random_tensor({4, 5}, rng);
            const Tensor w = random_tensor({4, 5}, rng);
            Graph g;
            g.backward(g.sum(g.mul(g.softmax_rows(g.param(z)), g.constant(w))));
            track("softmax_rows", fd_check(z, z.grad, [&] {
                const Tensor p = softmax_rows(z);
                double s = 0.0;
                for (std::size_t i = 0; i < p.size(); ++i) s += p.data[i] * w.data[i];
                return s;
            }, 10, rng));
        }
        {
            Tensor logits = random_tensor({6, 4}, rng);
            std::vector<int> labels(6);
            for (auto& y : labels) y = static_cast<int>(rng.below(4));
            Graph g;
            g.backward(g.cross_entropy(g.param(logits), labels));
            track("cross_entropy", fd_check(logits, logits.grad, [&] {
                return cross_entropy_value(logits, labels);
            }, 10, rng));
        }
        {
            Tensor zp = random_tensor({3, 4}, rng);
            Tensor zq = random_tensor({3, 4}, rng);
            Graph g;
            Graph::Node p = g.softmax_rows(g.param(zp));
            Graph::Node q = g.softmax_rows(g.param(zq));
            g.backward(g.kl_rows(p, q));
            const auto loss_fn = [&] {
                return kl_rows_value(softmax_rows(zp), softmax_rows(zq));
            };
            track("kl_rows(p)", fd_check(zp, zp.grad, loss_fn, 5, rng));
            track("kl_rows(q)", fd_check(zq, zq.grad, loss_fn, 5, rng));
        }
        {
            Tensor z = random_tensor({4, 3}, rng);
            const Tensor w = random_tensor({4, 4}, rng);
            Graph g;
            g.backward(g.sum(g.mul(g.gram_sample(g.param(z)), g.constant(w))));
            track("gram_sample", fd_check(z, z.grad, [&] {
                const Tensor s = gram_sample(z);
                double acc = 0.0;
                for (std::size_t i = 0; i < s.size(); ++i) acc += s.data[i] * w.data[i];
                return acc;
            }, 10, rng));
        }
        {
            Tensor z = random_tensor({4, 3}, rng);
            const Tensor w = random_tensor({3, 3}, rng);
            Graph g;
            g.backward(g.sum(g.mul(g.gram_channel(g.param(z)), g.constant(w))));
            track("gram_channel", fd_check(z, z.grad, [&] {
                const Tensor s = gram_channel(z);
                double acc = 0.0;
                for (std::size_t i = 0; i < s.size(); ++i) acc += s.data[i] * w.data[i];
                return acc;
            }, 10, rng));
        }
        {
            Tensor x = random_tensor({5, 3}, rng);
            const Tensor mu = random_tensor({3}, rng);
            Tensor base = random_tensor({3, 3}, rng);
            Tensor a = Tensor::zeros({3, 3});
            for (std::size_t i = 0; i < 3; ++i)
                for (std::size_t j = 0; j < 3; ++j)
                    a.at(i, j) = 0.5 * (base.at(i, j) + base.at(j, i));
            Graph g;
            g.backward(g.sum(g.quadratic_form(g.param(x), mu, a)));
            track("quadratic_form", fd_check(x, x.grad, [&] {
                double s = 0.0;
                for (double v : quadratic_form(x, mu, a).data) s += v;
                return s;
            }, 10, rng));
        }
    }

    // Composite stage-1 loss wrt the student parameters.
    {
        ModelConfig arch{5, {6}, 4, 3};
        ModelState st = init_model(arch, 99);
        for (auto& it : st.teacher_encoder.items)
            for (auto& v : it.tensor.data) v += 0.03;
        Rng drng(7);
        const Tensor batch = random_tensor({8, 5}, drng);
        std::vector<int> labels(8);
        for (auto& y : labels) y = static_cast<int>(drng.below(3));
        Stage1Config cfg;
        cfg.lambda1 = 10.0;
        cfg.perturb_strong = {0.3, 0.1, 0.05, 31};
        cfg.perturb_weak = {0.05, 0.0, 0.01, 32};

        Graph g;
        Graph::Node total = loss_stage1(g, batch, labels, st, cfg, 3);
        g.backward(total);
        const auto loss_fn = [&] {
            Graph g2;
            Stage1Breakdown bd;
            loss_stage1(g2, batch, labels, st, cfg, 3, &bd);
            return bd.total;
        };
        int probes_left = 100;
        for (auto* set : {&st.encoder, &st.classifier})
            for (auto& it : set->items) {
                const int probes = std::min<int>(probes_left, 13);
                if (probes <= 0) break;
                probes_left -= probes;
                track("loss_stage1",
                      fd_check(it.tensor, it.tensor.grad, loss_fn, probes, rng));
            }
    }

    // Composite FDC loss wrt the encoder parameters.
    {
        ModelConfig arch{4, {6}, 3, 3};
        ModelState st = init_model(arch, 123);
        Rng drng(8);
        const Tensor batch = random_tensor({9, 4}, drng);
        std::vector<int> labels(9);
        for (std::size_t i = 0; i < 9; ++i) labels[i] = static_cast<int>(i % 3);
        const Tensor feats = encoder_forward_value(batch, st.encoder);
        const ClassMoments moments =
            estimate_class_moments(feats, labels, 3, SamplingMode::uniform, 0.01);
        IccConfig cfg;
        cfg.lambda_e = 0.05;

        Graph g;
        Graph::Node total = fdc_loss(g, batch, labels, st, moments, cfg);
        g.backward(total);
        const auto loss_fn = [&] {
            Graph g2;
            FdcBreakdown bd;
            fdc_loss(g2, batch, labels, st, moments, cfg, &bd);
            return bd.total;
        };
        int probes_left = 100;
        for (auto& it : st.encoder.items) {
            const int probes = std::min<int>(probes_left, 25);
            probes_left -= probes;
            track("fdc_loss", fd_check(it.tensor, it.tensor.grad, loss_fn, probes, rng));
        }
    }

    const double secs = now_seconds(t0);
    const bool pass = worst < 1e-4 && secs < 30.0;
    record(1, pass,
           "gradient checks vs central differences: worst rel err " + fmt(worst, 8) +
               " (" + worst_op + ", tol 1e-4), " + fmt(secs, 1) + " s (limit 30)");
}

// ============================================================
// Criterion 2: VFC moment recovery and 1/sqrt(R) rate
// ============================================================

double frob_rel(const Tensor& got, const Tensor& want) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        const double d = got.data[i] - want.data[i];
        num += d * d;
        den += want.data[i] * want.data[i];
    }
    return std::sqrt(num) / std::max(std::sqrt(den), 1e-300);
}

void criterion_vfc() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(515);

    Tensor base = random_tensor({3, 3}, rng);
    const Tensor bbt = matmul(base, transpose(base));
    Tensor sigma = bbt;
    for (std::size_t i = 0; i < 3; ++i) sigma.at(i, i) += 1.0;
    const Tensor mu = Tensor::from({3}, {1.0, -2.0, 0.5});
    const ClassMoments target = ClassMoments::from_parameters({mu}, {sigma}, 0.0);

    // R = 50,000: per-coordinate mean bound and 5% covariance error.
    bool mean_ok = true;
    double cov_err_50k = 0.0;
    {
        const VirtualFeatureBank bank = vfc_sample(target, 50000, 99);
        const ClassMoments est = estimate_class_moments(bank.features, bank.labels, 1,
                                                        SamplingMode::uniform, 0.0);
        for (std::size_t d = 0; d < 3; ++d) {
            const double tol = 4.0 * std::sqrt(sigma.at(d, d) / 50000.0);
            if (std::abs(est.mu[0].data[d] - mu.data[d]) > tol) mean_ok = false;
        }
        cov_err_50k = frob_rel(est.sigma[0], sigma);
    }

    // Error ratio per decade of R, averaged over 4 seeds per point.
    double err[3];
    const long long rs[3] = {500, 5000, 50000};
    for (int i = 0; i < 3; ++i) {
        double acc = 0.0;
        for (std::uint64_t s = 0; s < 4; ++s) {
            const VirtualFeatureBank bank = vfc_sample(target, rs[i], 100 + s);
            const ClassMoments est = estimate_class_moments(
                bank.features, bank.labels, 1, SamplingMode::uniform, 0.0);
            acc += frob_rel(est.sigma[0], sigma);
        }
        err[i] = acc / 4.0;
    }
    const double root10 = std::sqrt(10.0);
    const double r1 = err[0] / err[1];
    const double r2 = err[1] / err[2];
    const bool rate_ok = r1 >= 0.5 * root10 && r1 <= 1.5 * root10 &&
                         r2 >= 0.5 * root10 && r2 <= 1.5 * root10;

    const double secs = now_seconds(t0);
    const bool pass = mean_ok && cov_err_50k <= 0.05 && rate_ok && secs < 20.0;
    record(2, pass,
           "VFC moment recovery at R=50000: mean within 4*sqrt(S_ii/R) " +
               std::string(mean_ok ? "yes" : "NO") + ", cov frob rel err " +
               fmt(cov_err_50k) + " (tol 0.05), decade ratios " + fmt(r1, 2) + "/" +
               fmt(r2, 2) + " (sqrt(10) +- 50%), " + fmt(secs, 1) + " s (limit 20)");
}

// ============================================================
// Criterion 3: class-balanced estimator property
// ============================================================

void criterion_balanced_estimator() {
    const auto t0 = std::chrono::steady_clock::now();
    // Fresh r=100 data each trial; the standard error of each class-mean
    // estimate is sample_std(draws used) / sqrt(#draws), averaged over trials.
    double se_head_u = 0.0, se_tail_u = 0.0, se_head_b = 0.0, se_tail_b = 0.0;
    const int trials = 200;
    for (int t = 0; t < trials; ++t) {
        LongTailSpec spec;
        spec.num_classes = 8;
        spec.head_count = 1000;
        spec.imbalance_factor = 100.0;
        spec.feature_dim = 6;
        spec.noise_dims = 0;
        spec.class_separation = 3.0;
        spec.seed = 9000 + static_cast<std::uint64_t>(t);
        const Dataset ds = synth_longtail(spec);
        const std::uint64_t stream = 400 + static_cast<std::uint64_t>(t);
        const ClassMoments uni = estimate_class_moments(
            ds.features, ds.labels, 8, SamplingMode::uniform, 1e-4, 0.9, stream);
        const ClassMoments bal = estimate_class_moments(
            ds.features, ds.labels, 8, SamplingMode::class_balanced, 1e-4, 0.9, stream);
        auto se = [](const ClassMoments& m, std::size_t cls) {
            double tr = 0.0;
            for (std::size_t d = 0; d < m.dim; ++d) tr += m.sigma[cls].at(d, d);
            return std::sqrt(tr / static_cast<double>(m.dim) /
                             static_cast<double>(m.sample_counts[cls]));
        };
        se_head_u += se(uni, 0);
        se_tail_u += se(uni, 7);
        se_head_b += se(bal, 0);
        se_tail_b += se(bal, 7);
    }
    const double ratio_u = se_tail_u / se_head_u;
    const double ratio_b = se_tail_b / se_head_b;
    const double secs = now_seconds(t0);
    const bool pass = ratio_b <= 2.0 && ratio_u > 3.0 && secs < 60.0;
    record(3, pass,
           "balanced-estimator property over 200 trials: tail/head SE ratio " +
               fmt(ratio_b, 3) + " class-balanced (<= 2), " + fmt(ratio_u, 3) +
               " uniform (> 3), " + fmt(secs, 1) + " s (limit 60)");
}

// ============================================================
// Criteria 4-6: shared end-to-end runs on the reference setup
// ============================================================

RunConfig reference_config() {
    RunConfig cfg;
    cfg.gen.num_classes = 8;
    cfg.gen.head_count = 1000;
    cfg.gen.imbalance_factor = 100.0;
    cfg.gen.feature_dim = 8;
    cfg.gen.noise_dims = 8;
    cfg.gen.class_separation = 3.0;
    cfg.gen.seed = 42;
    cfg.hidden = {32};
    cfg.feature_dim = 16;
    cfg.stage1.epochs = 60;
    cfg.stage1.batch_size = 128;
    cfg.stage1.lr = 0.02;
    cfg.stage1.lambda1 = 0.01;
    cfg.stage1.ce_on_strong_view = true;
    cfg.stage1.perturb_strong = {0.25, 0.05, 0.05, 0};
    cfg.stage1.perturb_weak = {0.05, 0.0, 0.01, 0};
    cfg.stage2.iterations = 5;
    cfg.stage2.r_virtual = 2000;
    cfg.stage2.lambda_e = 1e-3;
    cfg.stage2.lr_classifier = 0.02;
    cfg.stage2.lr_encoder = 1e-4;
    cfg.stage2.m_epochs = 3;
    cfg.stage2.e_epochs = 1;
    cfg.stage2.batch_size = 128;
    cfg.stage2.ridge = 0.05;
    cfg.seeds = {1, 2, 3, 4, 5};
    return cfg;
}

struct RowResult {
    std::vector<MetricsReport> reports;
    std::vector<IccTrace> traces;
};

RowResult run_row(const RunConfig& base, const std::string& row) {
    RunConfig cfg = base;
    if (row == "ce")
        cfg.baseline = "ce";
    else if (row != "full")
        cfg.ablations = {row};
    RowResult out;
    for (const auto seed : cfg.seeds) {
        SeedRunResult res = run_seed(cfg, seed);
        out.reports.push_back(res.report);
        out.traces.push_back(res.icc_trace);
    }
    return out;
}

void criteria_end_to_end() {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig cfg = reference_config();

    const RowResult ce = run_row(cfg, "ce");
    const RowResult full = run_row(cfg, "full");
    const RowResult no_vfc = run_row(cfg, "no_vfc");
    const RowResult no_rrl = run_row(cfg, "no_rrl");
    const RowResult no_fdc = run_row(cfg, "no_fdc");
    const double run_secs = now_seconds(t0);

    auto mean_of = [](const RowResult& r, auto getter) {
        double s = 0.0;
        for (const auto& rep : r.reports) s += getter(rep);
        return s / static_cast<double>(r.reports.size());
    };
    const auto bacc = [](const MetricsReport& r) { return r.bacc; };
    const auto tail = [](const MetricsReport& r) { return r.group_bacc.tail; };
    const auto head = [](const MetricsReport& r) { return r.group_bacc.head; };

    // Criterion 4: directional end-to-end improvement.
    {
        const double d_bacc = mean_of(full, bacc) - mean_of(ce, bacc);
        const double d_tail = mean_of(full, tail) - mean_of(ce, tail);
        const bool pass = d_bacc >= 0.05 && d_tail >= 0.10 && run_secs < 600.0;
        record(4, pass,
               "end-to-end vs CE over 5 seeds: bacc " + fmt(mean_of(ce, bacc)) + " -> " +
                   fmt(mean_of(full, bacc)) + " (+" + fmt(d_bacc) +
                   ", need >= 0.05), tail " + fmt(mean_of(ce, tail)) + " -> " +
                   fmt(mean_of(full, tail)) + " (+" + fmt(d_tail) +
                   ", need >= 0.10), all 25 runs " + fmt(run_secs, 1) +
                   " s (limit 600)");
    }

    // Criterion 5: ablation directions.
    {
        int head_dir = 0, tail_dir = 0;
        for (std::size_t s = 0; s < cfg.seeds.size(); ++s) {
            if (head(no_vfc.reports[s]) > head(full.reports[s])) ++head_dir;
            if (tail(no_vfc.reports[s]) < tail(full.reports[s])) ++tail_dir;
        }
        const double d_rrl = mean_of(full, bacc) - mean_of(no_rrl, bacc);
        const double d_fdc = mean_of(full, bacc) - mean_of(no_fdc, bacc);
        const bool vfc_ok = head_dir >= 4 && tail_dir >= 4;
        const bool rrl_ok = d_rrl > 0.0;
        const bool fdc_ok = d_fdc > 0.0;
        std::ostringstream os;
        os << "ablation directions: w/o VFC head>full " << head_dir
           << "/5 and tail<full " << tail_dir << "/5 (each need >= 4) "
           << (vfc_ok ? "ok" : "UNMET") << "; full-minus-no_rrl " << fmt(d_rrl)
           << " (need > 0) " << (rrl_ok ? "ok" : "UNMET") << "; full-minus-no_fdc "
           << fmt(d_fdc) << " (need > 0) " << (fdc_ok ? "ok" : "UNMET");
        if (!vfc_ok || !rrl_ok)
            os << " [known desk-scale limits: the linear classifier makes the "
                  "balanced real and virtual banks moment-equivalent, and the "
                  "synthetic geometry offers no redundancy for view consistency; "
                  "see the decisions ledger]";
        record(5, vfc_ok && rrl_ok && fdc_ok, os.str());
    }

    // Criterion 6: EM iteration trend and wall-clock monotonicity.
    {
        int trend = 0;
        bool clock_ok = true;
        for (const auto& trace : full.traces) {
            if (trace.entries.back().val_bacc >= trace.entries.front().val_bacc) ++trend;
            for (std::size_t j = 1; j < trace.wall_clock_seconds.size(); ++j)
                if (trace.wall_clock_seconds[j] <= trace.wall_clock_seconds[j - 1])
                    clock_ok = false;
        }
        const bool pass = trend >= 4 && clock_ok;
        record(6, pass,
               "EM iteration trend: val bacc at J=5 >= J=1 in " + std::to_string(trend) +
                   "/5 seeds (need >= 4); cumulative wall clock strictly increasing "
                   "with J: " + (clock_ok ? "yes" : "NO"));
    }
}

// ============================================================
// Criterion 7: metric oracles
// ============================================================

double auc_pair_oracle(const Tensor& scores, const std::vector<int>& y_true) {
    const std::size_t n = scores.rows(), k = scores.cols();
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t cls = 0; cls < k; ++cls) {
        std::vector<double> pos, neg;
        for (std::size_t i = 0; i < n; ++i)
            (static_cast<std::size_t>(y_true[i]) == cls ? pos : neg)
                .push_back(scores.at(i, cls));
        if (pos.empty() || neg.empty()) continue;
        double wins = 0.0;
        for (double p : pos)
            for (double q : neg) {
                if (p > q) wins += 1.0;
                else if (p == q) wins += 0.5;
            }
        sum += wins / (static_cast<double>(pos.size()) * static_cast<double>(neg.size()));
        ++used;
    }
    return used ? sum / static_cast<double>(used) : 0.5;
}

double kappa_oracle(const std::vector<std::vector<std::int64_t>>& m) {
    const std::size_t k = m.size();
    double n = 0.0;
    for (const auto& row : m)
        for (auto v : row) n += static_cast<double>(v);
    std::vector<double> pr(k, 0.0), pc(k, 0.0);
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            pr[i] += static_cast<double>(m[i][j]) / n;
            pc[j] += static_cast<double>(m[i][j]) / n;
        }
    double observed = 0.0, expected = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double d = (static_cast<double>(i) - static_cast<double>(j)) /
                             static_cast<double>(k - 1);
            observed += d * d * static_cast<double>(m[i][j]) / n;
            expected += d * d * pr[i] * pc[j];
        }
    return 1.0 - observed / expected;
}

void criterion_metric_oracles() {
    Rng rng(606);
    double worst_auc = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 10 + rng.below(60);
        const std::size_t k = 2 + rng.below(5);
        Tensor scores = Tensor::zeros({n, k});
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng.below(k));
            for (std::size_t j = 0; j < k; ++j)
                scores.at(i, j) = std::floor(rng.uniform() * 10.0) / 10.0;
        }
        worst_auc = std::max(
            worst_auc, std::abs(auc_ovr_macro(scores, y) - auc_pair_oracle(scores, y)));
    }

    double worst_kappa = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t k = 2 + rng.below(6);
        std::vector<std::vector<std::int64_t>> m(k, std::vector<std::int64_t>(k, 0));
        for (auto& row : m)
            for (auto& v : row) v = static_cast<std::int64_t>(rng.below(25));
        for (std::size_t i = 0; i < k; ++i) m[i][i] += 1;
        worst_kappa = std::max(worst_kappa,
                               std::abs(quadratic_weighted_kappa(m) - kappa_oracle(m)));
    }

    const bool pass = worst_auc <= 1e-12 && worst_kappa <= 1e-12;
    record(7, pass,
           "metric oracle equivalence over 50 instances each: AUC vs pair counting "
           "max |diff| " + fmt(worst_auc, 16) + ", kappa vs re-implementation max "
           "|diff| " + fmt(worst_kappa, 16) + " (tol 1e-12)");
}

// ============================================================
// Criterion 8: determinism and persistence
// ============================================================

void criterion_determinism() {
    const std::string dir = (fs::temp_directory_path() / "lmd_acceptance").string();
    fs::remove_all(dir);
    fs::create_directories(dir);

    RunConfig cfg;
    cfg.gen.num_classes = 4;
    cfg.gen.head_count = 200;
    cfg.gen.imbalance_factor = 20.0;
    cfg.gen.feature_dim = 5;
    cfg.gen.noise_dims = 3;
    cfg.gen.class_separation = 3.0;
    cfg.gen.seed = 11;
    cfg.hidden = {16};
    cfg.feature_dim = 8;
    cfg.stage1.epochs = 10;
    cfg.stage1.batch_size = 64;
    cfg.stage1.lambda1 = 0.01;
    cfg.stage1.ce_on_strong_view = true;
    cfg.stage2.iterations = 2;
    cfg.stage2.r_virtual = 400;
    cfg.stage2.m_epochs = 2;
    cfg.stage2.e_epochs = 1;
    cfg.stage2.lr_classifier = 0.02;
    cfg.stage2.lr_encoder = 1e-4;
    cfg.stage2.ridge = 0.05;
    cfg.seeds = {7};

    bool reports_identical = false;
    bool ckpt_roundtrip = false;
    bool ckpt_corrupt_detected = false;
    bool ds_roundtrip = false;
    bool ds_corrupt_detected = false;

    {
        RunConfig a = cfg;
        a.out_dir = dir + "/a";
        RunConfig b = cfg;
        b.out_dir = dir + "/b";
        run_pipeline(a);
        run_pipeline(b);
        reports_identical =
            read_file(dir + "/a/seed7/report.json") ==
                read_file(dir + "/b/seed7/report.json") &&
            read_file(dir + "/a/aggregate.json") == read_file(dir + "/b/aggregate.json") &&
            read_file(dir + "/a/seed7/checkpoint.lmdc") ==
                read_file(dir + "/b/seed7/checkpoint.lmdc");
    }

    {
        const std::string p1 = dir + "/a/seed7/checkpoint.lmdc";
        const LoadedCheckpoint loaded = load_checkpoint(p1);
        const std::string p2 = dir + "/resaved.lmdc";
        save_checkpoint(loaded.state, p2, loaded.meta);
        ckpt_roundtrip = read_file(p1) == read_file(p2);

        std::string bytes = read_file(p1);
        bytes[bytes.size() / 3] = static_cast<char>(bytes[bytes.size() / 3] ^ 0x04);
        write_file_atomic(dir + "/corrupt.lmdc", bytes);
        try {
            load_checkpoint(dir + "/corrupt.lmdc");
        } catch (const DataError&) {
            ckpt_corrupt_detected = true;
        }
    }

    {
        LongTailSpec spec = cfg.gen;
        const Dataset ds = synth_longtail(spec);
        const std::string p1 = dir + "/data.lmds";
        save_dataset(ds, p1);
        const Dataset loaded = load_dataset(p1);
        const std::string p2 = dir + "/data2.lmds";
        save_dataset(loaded, p2);
        ds_roundtrip = read_file(p1) == read_file(p2);

        std::string bytes = read_file(p1);
        bytes[bytes.size() / 2] = static_cast<char>(bytes[bytes.size() / 2] ^ 0x01);
        write_file_atomic(dir + "/corrupt.lmds", bytes);
        try {
            load_dataset(dir + "/corrupt.lmds");
        } catch (const DataError&) {
            ds_corrupt_detected = true;
        }
    }

    fs::remove_all(dir);
    const bool pass = reports_identical && ckpt_roundtrip && ckpt_corrupt_detected &&
                      ds_roundtrip && ds_corrupt_detected;
    record(8, pass,
           std::string("determinism and persistence: byte-identical reports/checkpoints "
                       "across reruns ") + (reports_identical ? "yes" : "NO") +
               ", checkpoint round trip " + (ckpt_roundtrip ? "yes" : "NO") +
               ", dataset round trip " + (ds_roundtrip ? "yes" : "NO") +
               ", single-bit corruption detected " +
               (ckpt_corrupt_detected && ds_corrupt_detected ? "yes" : "NO"));
}

} // namespace

int main() {
    std::printf("== acceptance suite ==\n");
    criterion_gradients();
    criterion_vfc();
    criterion_balanced_estimator();
    criteria_end_to_end();
    criterion_metric_oracles();
    criterion_determinism();

    int failed = 0;
    for (const auto& c : g_results)
        if (!c.pass) ++failed;
    std::printf("== %zu criteria, %d failed ==\n", g_results.size(), failed);
    return failed == 0 ? 0 : 1;
}
