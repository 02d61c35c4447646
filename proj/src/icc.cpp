#include "lmd/icc.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "lmd/rrl.hpp"

namespace lmd {

void IccConfig::validate() const {
    if (iterations < 1) throw ValidationError("icc: iterations must be >= 1");
    if (r_virtual < 1) throw ValidationError("icc: r_virtual must be >= 1");
    if (lambda_e < 0.0) throw ValidationError("icc: lambda_e must be >= 0");
    if (!(lr_classifier > 0.0)) throw ValidationError("icc: lr_classifier must be > 0");
    if (!(lr_encoder > 0.0)) throw ValidationError("icc: lr_encoder must be > 0");
    if (m_epochs < 0 || e_epochs < 0)
        throw ValidationError("icc: epoch counts must be >= 0");
    if (batch_size < 1) throw ValidationError("icc: batch_size must be >= 1");
    if (moment_momentum < 0.0 || moment_momentum >= 1.0)
        throw ValidationError("icc: moment_momentum must be in [0, 1)");
    if (ridge < 0.0) throw ValidationError("icc: ridge must be >= 0");
}

Tensor cholesky_lower(const Tensor& a) {
    if (a.ndim() != 2 || a.rows() != a.cols())
        throw ValidationError("cholesky: matrix must be square");
    const std::size_t n = a.rows();
    Tensor l = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = a.at(i, j);
            for (std::size_t p = 0; p < j; ++p) s -= l.at(i, p) * l.at(j, p);
            if (i == j) {
                if (!(s > 0.0))
                    throw NumericError("cholesky: matrix is not positive definite");
                l.at(i, i) = std::sqrt(s);
            } else {
                l.at(i, j) = s / l.at(j, j);
            }
        }
    }
    return l;
}

namespace {

Tensor symmetrize(const Tensor& a) {
    Tensor out = a;
    const std::size_t n = a.rows();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
            out.at(i, j) = 0.5 * (a.at(i, j) + a.at(j, i));
    return out;
}

double trace_of(const Tensor& a) {
    double t = 0.0;
    for (std::size_t i = 0; i < a.rows(); ++i) t += a.at(i, i);
    return t;
}

// Effective ridge scales with the covariance magnitude; degenerate (zero)
// covariances fall back to the absolute knob.
double effective_ridge(const Tensor& sigma, double ridge) {
    const double scale = trace_of(sigma) / static_cast<double>(sigma.rows());
    return ridge * (scale > 0.0 ? scale : 1.0);
}

Tensor ridge_factor(const Tensor& sigma, double eff_ridge) {
    Tensor a = sigma;
    for (std::size_t i = 0; i < a.rows(); ++i) a.at(i, i) += eff_ridge;
    return cholesky_lower(a);
}

void factor_class(ClassMoments& m, std::size_t k) {
    const double eff = effective_ridge(m.sigma[k], m.ridge);
    try {
        m.chol[k] = ridge_factor(m.sigma[k], eff);
        m.ridge_used[k] = eff;
        return;
    } catch (const NumericError&) {
        // Rank-deficient tail covariances can defeat the scaled ridge.
    }
    double boosted = std::max(eff, m.ridge) * 10.0;
    for (int attempt = 0; attempt < 8; ++attempt, boosted *= 10.0) {
        try {
            m.chol[k] = ridge_factor(m.sigma[k], boosted);
            m.ridge_used[k] = boosted;
            warn("moments: class " + std::to_string(k) + " needed ridge " +
                 std::to_string(boosted) + " to factor");
            return;
        } catch (const NumericError&) {
        }
    }
    throw NumericError("moments: covariance of class " + std::to_string(k) +
                       " cannot be factored");
}

} // namespace

ClassMoments ClassMoments::from_parameters(std::vector<Tensor> mu,
                                           std::vector<Tensor> sigma, double ridge,
                                           double ema_momentum) {
    if (mu.empty() || mu.size() != sigma.size())
        throw ValidationError("moments: mu/sigma class counts differ");
    ClassMoments m;
    m.num_classes = mu.size();
    m.dim = mu[0].size();
    m.mu = std::move(mu);
    m.sigma = std::move(sigma);
    m.ridge = ridge;
    m.ema_momentum = ema_momentum;
    m.chol.resize(m.num_classes);
    m.ridge_used.assign(m.num_classes, 0.0);
    m.sample_counts.assign(m.num_classes, 0);
    for (std::size_t k = 0; k < m.num_classes; ++k) {
        if (m.mu[k].size() != m.dim || m.sigma[k].ndim() != 2 ||
            m.sigma[k].rows() != m.dim || m.sigma[k].cols() != m.dim)
            throw ValidationError("moments: inconsistent shapes at class " +
                                  std::to_string(k));
        m.sigma[k] = symmetrize(m.sigma[k]);
        factor_class(m, k);
    }
    return m;
}

void ClassMoments::validate() const {
    if (mu.size() != num_classes || sigma.size() != num_classes ||
        chol.size() != num_classes)
        throw ValidationError("moments: inconsistent class count");
    for (std::size_t k = 0; k < num_classes; ++k) {
        check_finite(mu[k].data, "class mean");
        check_finite(sigma[k].data, "class covariance");
        for (std::size_t i = 0; i < dim; ++i)
            for (std::size_t j = i + 1; j < dim; ++j)
                if (std::abs(sigma[k].at(i, j) - sigma[k].at(j, i)) > 1e-9)
                    throw ValidationError("moments: sigma not symmetric at class " +
                                          std::to_string(k));
    }
}

ClassMoments estimate_class_moments(const Tensor& features, std::span<const int> labels,
                                    int num_classes, SamplingMode mode, double ridge,
                                    double ema_momentum, std::uint64_t seed) {
    if (features.ndim() != 2 || features.rows() != labels.size())
        throw ValidationError("moments: features must be N x C matching labels");
    if (num_classes < 1) throw ValidationError("moments: need at least one class");
    check_labels(labels, static_cast<std::size_t>(num_classes));
    const std::size_t n = features.rows(), c = features.cols();
    const auto k = static_cast<std::size_t>(num_classes);

    std::vector<std::vector<int>> members(k);
    for (std::size_t i = 0; i < n; ++i)
        members[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));
    for (std::size_t cls = 0; cls < k; ++cls)
        if (members[cls].empty())
            throw ValidationError("moments: class " + std::to_string(cls) +
                                  " has no samples");

    // Rows each class's statistics are computed from. Uniform mode uses the
    // class members directly; balanced mode draws N rows from the balanced
    // stream so every class contributes ~N/K draws regardless of N_k.
    std::vector<std::vector<int>> rows = members;
    if (mode == SamplingMode::class_balanced) {
        Rng rng(derive_seed(seed, seed_tag("balanced-moments")));
        for (auto& r : rows) r.clear();
        for (std::size_t d = 0; d < n; ++d) {
            const auto cls = static_cast<std::size_t>(rng.below(k));
            const auto& pool = members[cls];
            rows[cls].push_back(pool[static_cast<std::size_t>(rng.below(pool.size()))]);
        }
    }

    ClassMoments m;
    m.num_classes = k;
    m.dim = c;
    m.ridge = ridge;
    m.ema_momentum = ema_momentum;
    m.mu.resize(k);
    m.sigma.resize(k);
    m.chol.resize(k);
    m.ridge_used.assign(k, 0.0);
    m.sample_counts.assign(k, 0);

    for (std::size_t cls = 0; cls < k; ++cls) {
        std::vector<int>& src = rows[cls];
        if (src.empty()) {
            warn("moments: balanced stream drew no samples for class " +
                 std::to_string(cls) + "; falling back to class members");
            src = members[cls];
        }
        const auto cnt = static_cast<double>(src.size());
        m.sample_counts[cls] = static_cast<long long>(src.size());

        Tensor mean = Tensor::zeros({c});
        for (int row : src)
            for (std::size_t d = 0; d < c; ++d)
                mean.data[d] += features.at(static_cast<std::size_t>(row), d);
        for (auto& v : mean.data) v /= cnt;
        m.mu[cls] = std::move(mean);

        if (src.size() < 2) {
            warn("moments: class " + std::to_string(cls) +
                 " has fewer than 2 samples; covariance falls back to ridge*I");
            m.sigma[cls] = Tensor::zeros({c, c});
            m.ridge_used[cls] = ridge;
            Tensor chol = Tensor::zeros({c, c});
            const double s = std::sqrt(ridge);
            for (std::size_t d = 0; d < c; ++d) chol.at(d, d) = s;
            m.chol[cls] = std::move(chol);
            continue;
        }

        Tensor cov = Tensor::zeros({c, c});
        std::vector<double> centered(c);
        for (int row : src) {
            for (std::size_t d = 0; d < c; ++d)
                centered[d] = features.at(static_cast<std::size_t>(row), d) -
                              m.mu[cls].data[d];
            for (std::size_t i = 0; i < c; ++i)
                for (std::size_t j = i; j < c; ++j)
                    cov.at(i, j) += centered[i] * centered[j];
        }
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = i; j < c; ++j) {
                cov.at(i, j) /= (cnt - 1.0);
                cov.at(j, i) = cov.at(i, j);
            }
        m.sigma[cls] = std::move(cov);
        factor_class(m, cls);
    }
    return m;
}

ClassMoments ema_moments(const ClassMoments& prev, const ClassMoments& next) {
    if (prev.num_classes != next.num_classes || prev.dim != next.dim)
        throw ValidationError("ema_moments: shape mismatch");
    const double m = prev.ema_momentum;
    ClassMoments out;
    out.num_classes = prev.num_classes;
    out.dim = prev.dim;
    out.ridge = prev.ridge;
    out.ema_momentum = prev.ema_momentum;
    out.sample_counts = next.sample_counts;
    out.mu.resize(out.num_classes);
    out.sigma.resize(out.num_classes);
    out.chol.resize(out.num_classes);
    out.ridge_used.assign(out.num_classes, 0.0);
    for (std::size_t k = 0; k < out.num_classes; ++k) {
        out.mu[k] = prev.mu[k];
        for (std::size_t i = 0; i < out.dim; ++i)
            out.mu[k].data[i] = m * prev.mu[k].data[i] + (1.0 - m) * next.mu[k].data[i];
        out.sigma[k] = prev.sigma[k];
        for (std::size_t i = 0; i < out.dim * out.dim; ++i)
            out.sigma[k].data[i] =
                m * prev.sigma[k].data[i] + (1.0 - m) * next.sigma[k].data[i];
        factor_class(out, k);
    }
    return out;
}

VirtualFeatureBank vfc_sample(const ClassMoments& moments, long long r_per_class,
                              std::uint64_t seed) {
    if (r_per_class < 1) throw ValidationError("vfc: r_per_class must be >= 1");
    moments.validate();
    const std::size_t k = moments.num_classes, c = moments.dim;
    const auto r = static_cast<std::size_t>(r_per_class);

    VirtualFeatureBank bank;
    bank.per_class = r_per_class;
    bank.features = Tensor::zeros({r * k, c});
    bank.labels.reserve(r * k);

    std::vector<double> xi(c);
    for (std::size_t cls = 0; cls < k; ++cls) {
        Rng rng(derive_seed(seed, seed_tag("vfc-class"), cls));
        const Tensor& l = moments.chol[cls];
        const Tensor& mu = moments.mu[cls];
        for (std::size_t i = 0; i < r; ++i) {
            for (auto& v : xi) v = rng.normal();
            double* row = &bank.features.data[(cls * r + i) * c];
            for (std::size_t p = 0; p < c; ++p) {
                double s = mu.data[p];
                // Lower-triangular product: only q <= p contributes.
                for (std::size_t q = 0; q <= p; ++q) s += l.at(p, q) * xi[q];
                row[p] = s;
            }
            bank.labels.push_back(static_cast<int>(cls));
        }
    }
    check_finite(bank.features.data, "virtual feature bank");
    return bank;
}

VirtualFeatureBank real_feature_bank(const Tensor& features, std::span<const int> labels,
                                     int num_classes, long long r_per_class,
                                     std::uint64_t seed) {
    if (r_per_class < 1) throw ValidationError("bank: r_per_class must be >= 1");
    check_labels(labels, static_cast<std::size_t>(num_classes));
    const auto k = static_cast<std::size_t>(num_classes);
    const std::size_t c = features.cols();
    const auto r = static_cast<std::size_t>(r_per_class);

    std::vector<std::vector<int>> members(k);
    for (std::size_t i = 0; i < labels.size(); ++i)
        members[static_cast<std::size_t>(labels[i])].push_back(static_cast<int>(i));
    for (std::size_t cls = 0; cls < k; ++cls)
        if (members[cls].empty())
            throw ValidationError("bank: class " + std::to_string(cls) +
                                  " has no samples");

    VirtualFeatureBank bank;
    bank.per_class = r_per_class;
    bank.features = Tensor::zeros({r * k, c});
    bank.labels.reserve(r * k);
    for (std::size_t cls = 0; cls < k; ++cls) {
        Rng rng(derive_seed(seed, seed_tag("real-bank-class"), cls));
        const auto& pool = members[cls];
        for (std::size_t i = 0; i < r; ++i) {
            const auto row = static_cast<std::size_t>(
                pool[static_cast<std::size_t>(rng.below(pool.size()))]);
            std::copy_n(&features.data[row * c], c,
                        &bank.features.data[(cls * r + i) * c]);
            bank.labels.push_back(static_cast<int>(cls));
        }
    }
    return bank;
}

std::vector<Tensor> metric_matrices(const ClassMoments& moments, MahalanobisMode mode) {
    const std::size_t k = moments.num_classes, c = moments.dim;
    std::vector<Tensor> out(k);
    for (std::size_t cls = 0; cls < k; ++cls) {
        if (mode == MahalanobisMode::as_printed) {
            out[cls] = symmetrize(moments.sigma[cls]);
            continue;
        }
        // (sigma + ridge I)^-1 = L^-T L^-1 from the stored factor.
        const Tensor& l = moments.chol[cls];
        Tensor linv = Tensor::zeros({c, c});
        for (std::size_t col = 0; col < c; ++col) {
            linv.at(col, col) = 1.0 / l.at(col, col);
            for (std::size_t i = col + 1; i < c; ++i) {
                double s = 0.0;
                for (std::size_t p = col; p < i; ++p) s += l.at(i, p) * linv.at(p, col);
                linv.at(i, col) = -s / l.at(i, i);
            }
        }
        Tensor m = Tensor::zeros({c, c});
        for (std::size_t i = 0; i < c; ++i)
            for (std::size_t j = i; j < c; ++j) {
                double s = 0.0;
                for (std::size_t p = std::max(i, j); p < c; ++p)
                    s += linv.at(p, i) * linv.at(p, j);
                m.at(i, j) = s;
                m.at(j, i) = s;
            }
        out[cls] = std::move(m);
    }
    return out;
}

namespace {

std::vector<std::vector<std::size_t>> rows_by_class(std::span<const int> labels,
                                                    std::size_t k) {
    std::vector<std::vector<std::size_t>> rows(k);
    for (std::size_t i = 0; i < labels.size(); ++i)
        rows[static_cast<std::size_t>(labels[i])].push_back(i);
    return rows;
}

} // namespace

double attraction_psi(const Tensor& features, std::span<const int> labels,
                      const ClassMoments& moments, MahalanobisMode mode) {
    if (features.rows() != labels.size())
        throw ValidationError("psi: features and labels disagree");
    check_labels(labels, moments.num_classes);
    const auto metrics = metric_matrices(moments, mode);
    const auto rows = rows_by_class(labels, moments.num_classes);
    double total = 0.0;
    for (std::size_t cls = 0; cls < moments.num_classes; ++cls) {
        if (rows[cls].empty()) continue;
        Tensor sub = Tensor::zeros({rows[cls].size(), features.cols()});
        for (std::size_t i = 0; i < rows[cls].size(); ++i)
            std::copy_n(&features.data[rows[cls][i] * features.cols()], features.cols(),
                        &sub.data[i * features.cols()]);
        const Tensor q = quadratic_form(sub, moments.mu[cls], metrics[cls]);
        for (double v : q.data) total += v;
    }
    return total / static_cast<double>(features.rows());
}

double repulsion_phi(const Tensor& features, std::span<const int> labels,
                     const ClassMoments& moments, MahalanobisMode mode) {
    if (features.rows() != labels.size())
        throw ValidationError("phi: features and labels disagree");
    if (moments.num_classes < 2)
        throw ValidationError("phi: needs at least two classes");
    check_labels(labels, moments.num_classes);
    const auto metrics = metric_matrices(moments, mode);
    double total = 0.0;
    for (std::size_t cls = 0; cls < moments.num_classes; ++cls) {
        std::vector<std::size_t> rows;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (static_cast<std::size_t>(labels[i]) != cls) rows.push_back(i);
        if (rows.empty()) continue;
        Tensor sub = Tensor::zeros({rows.size(), features.cols()});
        for (std::size_t i = 0; i < rows.size(); ++i)
            std::copy_n(&features.data[rows[i] * features.cols()], features.cols(),
                        &sub.data[i * features.cols()]);
        const Tensor q = quadratic_form(sub, moments.mu[cls], metrics[cls]);
        for (double v : q.data) total += v;
    }
    return total / (static_cast<double>(features.rows()) *
                    static_cast<double>(moments.num_classes - 1));
}

Graph::Node fdc_loss(Graph& g, const Tensor& batch_features,
                     const std::vector<int>& labels, ModelState& state,
                     const ClassMoments& moments, const IccConfig& cfg,
                     FdcBreakdown* breakdown,
                     const std::vector<Tensor>* precomputed_metrics) {
    if (batch_features.rows() != labels.size())
        throw ValidationError("fdc_loss: batch features and labels disagree");
    if (moments.num_classes < 2)
        throw ValidationError("fdc_loss: needs at least two classes");
    check_labels(labels, moments.num_classes);

    std::vector<Tensor> local;
    const std::vector<Tensor>* metrics = precomputed_metrics;
    if (!metrics) {
        local = metric_matrices(moments, cfg.mahalanobis_mode);
        metrics = &local;
    }

    const auto b = static_cast<double>(batch_features.rows());
    const std::size_t k = moments.num_classes;

    Graph::Node x = g.constant(batch_features);
    Graph::Node z = encoder_forward(g, x, state.encoder, true);
    Graph::Node logits = classifier_forward(g, z, state.classifier, false);
    Graph::Node ce = g.cross_entropy(logits, labels);

    const auto own_rows = rows_by_class(labels, k);
    std::optional<Graph::Node> psi_sum, phi_sum;
    for (std::size_t cls = 0; cls < k; ++cls) {
        if (!own_rows[cls].empty()) {
            Graph::Node q = g.quadratic_form(g.gather_rows(z, own_rows[cls]),
                                             moments.mu[cls], (*metrics)[cls]);
            Graph::Node s = g.sum(q);
            psi_sum = psi_sum ? g.add(*psi_sum, s) : s;
        }
        std::vector<std::size_t> other;
        for (std::size_t i = 0; i < labels.size(); ++i)
            if (static_cast<std::size_t>(labels[i]) != cls) other.push_back(i);
        if (!other.empty()) {
            Graph::Node q = g.quadratic_form(g.gather_rows(z, std::move(other)),
                                             moments.mu[cls], (*metrics)[cls]);
            Graph::Node s = g.sum(q);
            phi_sum = phi_sum ? g.add(*phi_sum, s) : s;
        }
    }
    Graph::Node psi = psi_sum ? g.scale(*psi_sum, 1.0 / b) : g.constant(Tensor::scalar(0.0));
    Graph::Node phi = phi_sum
                          ? g.scale(*phi_sum, 1.0 / (b * static_cast<double>(k - 1)))
                          : g.constant(Tensor::scalar(0.0));

    Graph::Node total = g.add(g.scale(g.sub(psi, phi), cfg.lambda_e), ce);

    if (breakdown) {
        breakdown->psi = g.value(psi).item();
        breakdown->phi = g.value(phi).item();
        breakdown->ce = g.value(ce).item();
        breakdown->total = g.value(total).item();
    }
    return total;
}

namespace {

Tensor gather_rows_value(const Tensor& features, std::span<const int> rows) {
    const std::size_t c = features.cols();
    Tensor out = Tensor::zeros({rows.size(), c});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(&features.data[static_cast<std::size_t>(rows[i]) * c], c,
                    &out.data[i * c]);
    return out;
}

std::vector<int> gather_labels_value(std::span<const int> labels,
                                     std::span<const int> rows) {
    std::vector<int> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out[i] = labels[static_cast<std::size_t>(rows[i])];
    return out;
}

} // namespace

double m_step(const VirtualFeatureBank& bank, ModelState& state, const IccConfig& cfg,
              std::uint64_t seed) {
    if (bank.size() == 0) throw ValidationError("m_step: empty feature bank");
    SgdConfig sgd{cfg.lr_classifier, std::nullopt};
    if (cfg.max_grad_norm > 0.0) sgd.max_grad_norm = cfg.max_grad_norm;
    InstanceSampler sampler(bank.size(), derive_seed(seed, seed_tag("m-step-order")));

    double final_epoch_loss = 0.0;
    for (int epoch = 0; epoch < cfg.m_epochs; ++epoch) {
        const std::vector<int> order = sampler.next_epoch();
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t off = 0; off < order.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const int> rows(order.data() + off, end - off);
            const Tensor bx = gather_rows_value(bank.features, rows);
            const std::vector<int> by = gather_labels_value(bank.labels, rows);

            Graph g;
            Graph::Node v = g.constant(bx);
            Graph::Node logits = classifier_forward(g, v, state.classifier, true);
            Graph::Node ce = g.cross_entropy(logits, by);
            try {
                g.backward(ce);
            } catch (const NumericError& e) {
                std::ostringstream os;
                os << e.what() << " [m_step epoch " << epoch << "]";
                throw NumericError(os.str());
            }
            sgd_step(state, ParamGroup::classifier, sgd);
            epoch_loss += g.value(ce).item();
            ++steps;
        }
        final_epoch_loss = epoch_loss / static_cast<double>(steps);
    }
    return final_epoch_loss;
}

double e_step(const Dataset& train, ModelState& state, const ClassMoments& moments,
              const IccConfig& cfg, std::uint64_t seed) {
    SgdConfig sgd{cfg.lr_encoder, std::nullopt};
    if (cfg.max_grad_norm > 0.0) sgd.max_grad_norm = cfg.max_grad_norm;
    const auto metrics = metric_matrices(moments, cfg.mahalanobis_mode);

    const std::uint64_t order_seed = derive_seed(seed, seed_tag("e-step-order"));
    std::optional<InstanceSampler> instance;
    std::optional<ClassBalancedSampler> balanced;
    if (cfg.e_step_sampling == SamplingMode::class_balanced)
        balanced.emplace(train, order_seed);
    else
        instance.emplace(train.size(), order_seed);

    double final_epoch_loss = 0.0;
    for (int epoch = 0; epoch < cfg.e_epochs; ++epoch) {
        const std::vector<int> order = balanced ? balanced->next_batch(train.size())
                                                : instance->next_epoch();
        double epoch_loss = 0.0;
        std::size_t steps = 0;
        for (std::size_t off = 0; off < order.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const int> rows(order.data() + off, end - off);
            const Tensor bx = gather_rows_value(train.features, rows);
            const std::vector<int> by = gather_labels_value(train.labels, rows);

            Graph g;
            FdcBreakdown bd;
            try {
                Graph::Node total = fdc_loss(g, bx, by, state, moments, cfg, &bd, &metrics);
                g.backward(total);
            } catch (const NumericError& e) {
                std::ostringstream os;
                os << e.what() << " [e_step epoch " << epoch << "]";
                throw NumericError(os.str());
            }
            sgd_step(state, ParamGroup::encoder, sgd);
            epoch_loss += bd.total;
            ++steps;
        }
        final_epoch_loss = epoch_loss / static_cast<double>(steps);
    }
    return final_epoch_loss;
}

IccResult run_icc(const Dataset& train, const Dataset& val,
                  const ModelState& stage1_state, const IccConfig& cfg) {
    cfg.validate();
    train.validate();
    const auto k = static_cast<int>(stage1_state.arch.num_classes);
    if (train.num_classes() != k)
        throw ValidationError("run_icc: dataset classes do not match the model");

    IccResult res;
    res.state = stage1_state;
    // The biased first-stage classifier is discarded; the encoder carries over.
    res.state.classifier =
        init_classifier(res.state.arch, derive_seed(cfg.seed, seed_tag("f0-reinit")));

    const auto t0 = std::chrono::steady_clock::now();
    std::optional<ClassMoments> moments;
    for (int j = 0; j < cfg.iterations; ++j) {
        const Tensor feats = encoder_forward_value(train.features, res.state.encoder);
        ClassMoments fresh = estimate_class_moments(
            feats, train.labels, k, cfg.m_step_stats_sampling, cfg.ridge,
            cfg.moment_momentum,
            derive_seed(cfg.seed, seed_tag("moment-stats"), static_cast<std::uint64_t>(j)));
        moments = moments ? ema_moments(*moments, fresh) : std::move(fresh);

        const std::uint64_t bank_seed =
            derive_seed(cfg.seed, seed_tag("bank"), static_cast<std::uint64_t>(j));
        const VirtualFeatureBank bank =
            cfg.use_virtual
                ? vfc_sample(*moments, cfg.r_virtual, bank_seed)
                : real_feature_bank(feats, train.labels, k, cfg.r_virtual, bank_seed);

        IccIterationRecord rec;
        rec.iteration = j;
        rec.m_loss = m_step(bank, res.state, cfg,
                            derive_seed(cfg.seed, seed_tag("m-step"), static_cast<std::uint64_t>(j)));
        rec.e_loss = e_step(train, res.state, *moments, cfg,
                            derive_seed(cfg.seed, seed_tag("e-step"), static_cast<std::uint64_t>(j)));
        rec.val_bacc = val.size() > 0 ? eval_bacc(res.state, val) : 0.0;
        res.trace.entries.push_back(rec);
        res.trace.wall_clock_seconds.push_back(
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count());
    }
    return res;
}

} // namespace lmd
