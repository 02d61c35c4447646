#include "lmd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace lmd {

GroupSpec GroupSpec::from_train_counts(const std::vector<int>& train_counts) {
    const int k = static_cast<int>(train_counts.size());
    if (k < 1) throw ValidationError("group spec: no classes");
    std::vector<int> order(static_cast<std::size_t>(k));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
        return train_counts[static_cast<std::size_t>(a)] >
               train_counts[static_cast<std::size_t>(b)];
    });
    const auto head_end = static_cast<std::size_t>(std::nearbyint(k / 3.0));
    const auto medium_end = static_cast<std::size_t>(std::nearbyint(2.0 * k / 3.0));
    GroupSpec spec;
    spec.assignment.assign(static_cast<std::size_t>(k), Group::tail);
    for (std::size_t rank = 0; rank < order.size(); ++rank) {
        std::size_t r = rank;
        // A count tied with the previous class follows that class's group.
        while (r > 0 && train_counts[static_cast<std::size_t>(order[rank])] ==
                            train_counts[static_cast<std::size_t>(order[r - 1])])
            --r;
        Group g = Group::tail;
        if (r < head_end)
            g = Group::head;
        else if (r < medium_end)
            g = Group::medium;
        spec.assignment[static_cast<std::size_t>(order[rank])] = g;
    }
    return spec;
}

GroupSpec GroupSpec::from_file(const std::string& path, int num_classes) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open group file: " + path);
    GroupSpec spec;
    spec.assignment.assign(static_cast<std::size_t>(num_classes), Group::tail);
    std::vector<bool> seen(static_cast<std::size_t>(num_classes), false);
    std::string word;
    int cls;
    while (in >> cls >> word) {
        if (cls < 0 || cls >= num_classes)
            throw ValidationError("group file: class " + std::to_string(cls) +
                                  " out of range");
        Group g;
        if (word == "head")
            g = Group::head;
        else if (word == "medium")
            g = Group::medium;
        else if (word == "tail")
            g = Group::tail;
        else
            throw ValidationError("group file: unknown group '" + word + "'");
        spec.assignment[static_cast<std::size_t>(cls)] = g;
        seen[static_cast<std::size_t>(cls)] = true;
    }
    for (int c = 0; c < num_classes; ++c)
        if (!seen[static_cast<std::size_t>(c)])
            throw ValidationError("group file: class " + std::to_string(c) +
                                  " has no group assignment");
    return spec;
}

void GroupSpec::validate(int num_classes) const {
    if (assignment.size() != static_cast<std::size_t>(num_classes))
        throw ValidationError("group spec covers " + std::to_string(assignment.size()) +
                              " classes, dataset has " + std::to_string(num_classes));
}

std::vector<std::vector<std::int64_t>> confusion_matrix(std::span<const int> y_true,
                                                        std::span<const int> y_pred,
                                                        int num_classes) {
    if (y_true.size() != y_pred.size())
        throw ValidationError("confusion_matrix: prediction count mismatch");
    check_labels(y_true, static_cast<std::size_t>(num_classes));
    check_labels(y_pred, static_cast<std::size_t>(num_classes));
    std::vector<std::vector<std::int64_t>> m(
        static_cast<std::size_t>(num_classes),
        std::vector<std::int64_t>(static_cast<std::size_t>(num_classes), 0));
    for (std::size_t i = 0; i < y_true.size(); ++i)
        ++m[static_cast<std::size_t>(y_true[i])][static_cast<std::size_t>(y_pred[i])];
    return m;
}

namespace {

std::vector<double> per_class_recall(const std::vector<std::vector<std::int64_t>>& m,
                                     std::vector<bool>* has_support = nullptr) {
    const std::size_t k = m.size();
    std::vector<double> recall(k, 0.0);
    if (has_support) has_support->assign(k, true);
    for (std::size_t i = 0; i < k; ++i) {
        std::int64_t row = 0;
        for (std::int64_t v : m[i]) row += v;
        if (row == 0) {
            if (has_support) (*has_support)[i] = false;
            continue;
        }
        recall[i] = static_cast<double>(m[i][i]) / static_cast<double>(row);
    }
    return recall;
}

} // namespace

double balanced_accuracy(const std::vector<std::vector<std::int64_t>>& confusion) {
    std::vector<bool> support;
    const auto recall = per_class_recall(confusion, &support);
    double sum = 0.0;
    std::size_t used = 0;
    for (std::size_t i = 0; i < recall.size(); ++i) {
        if (!support[i]) {
            warn("balanced_accuracy: class " + std::to_string(i) +
                 " has no samples; excluded");
            continue;
        }
        sum += recall[i];
        ++used;
    }
    if (used == 0) {
        warn("balanced_accuracy: no class has samples; returning 0");
        return 0.0;
    }
    return sum / static_cast<double>(used);
}

MacroPrf macro_f1_precision_recall(const std::vector<std::vector<std::int64_t>>& confusion) {
    const std::size_t k = confusion.size();
    MacroPrf out;
    for (std::size_t i = 0; i < k; ++i) {
        std::int64_t row = 0, col = 0;
        for (std::size_t j = 0; j < k; ++j) {
            row += confusion[i][j];
            col += confusion[j][i];
        }
        const double diag = static_cast<double>(confusion[i][i]);
        const double p = col > 0 ? diag / static_cast<double>(col) : 0.0;
        const double r = row > 0 ? diag / static_cast<double>(row) : 0.0;
        const double f1 = (p + r) > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
        out.precision += p;
        out.recall += r;
        out.f1 += f1;
    }
    out.precision /= static_cast<double>(k);
    out.recall /= static_cast<double>(k);
    out.f1 /= static_cast<double>(k);
    return out;
}

double auc_ovr_macro(const Tensor& scores, std::span<const int> y_true) {
    if (scores.ndim() != 2 || scores.rows() != y_true.size())
        throw ValidationError("auc: scores must be N x K with N == len(y_true)");
    const std::size_t n = scores.rows(), k = scores.cols();
    check_labels(y_true, k);

    double sum = 0.0;
    std::size_t used = 0;
    std::vector<std::size_t> order(n);
    std::vector<double> rank(n);
    for (std::size_t cls = 0; cls < k; ++cls) {
        std::size_t positives = 0;
        for (int y : y_true)
            if (static_cast<std::size_t>(y) == cls) ++positives;
        if (positives == 0 || positives == n) {
            warn("auc: class " + std::to_string(cls) +
                 " lacks positives or negatives; skipped");
            continue;
        }
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return scores.at(a, cls) < scores.at(b, cls);
        });
        // Average ranks across ties (1-based), the 1/2 tie convention.
        std::size_t i = 0;
        while (i < n) {
            std::size_t j = i;
            while (j + 1 < n && scores.at(order[j + 1], cls) == scores.at(order[i], cls))
                ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
            for (std::size_t t = i; t <= j; ++t) rank[order[t]] = avg;
            i = j + 1;
        }
        double rank_pos = 0.0;
        for (std::size_t t = 0; t < n; ++t)
            if (static_cast<std::size_t>(y_true[t]) == cls) rank_pos += rank[t];
        const double pos = static_cast<double>(positives);
        const double neg = static_cast<double>(n - positives);
        sum += (rank_pos - pos * (pos + 1.0) / 2.0) / (pos * neg);
        ++used;
    }
    if (used == 0) {
        warn("auc: no class is scorable; returning 0.5");
        return 0.5;
    }
    return sum / static_cast<double>(used);
}

double quadratic_weighted_kappa(const std::vector<std::vector<std::int64_t>>& confusion) {
    const std::size_t k = confusion.size();
    if (k < 2) {
        warn("kappa: fewer than 2 classes; returning 0");
        return 0.0;
    }
    std::vector<double> row(k, 0.0), col(k, 0.0);
    double total = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const auto v = static_cast<double>(confusion[i][j]);
            row[i] += v;
            col[j] += v;
            total += v;
        }
    if (total <= 0.0) {
        warn("kappa: empty confusion matrix; returning 0");
        return 0.0;
    }
    const double norm = static_cast<double>((k - 1) * (k - 1));
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        for (std::size_t j = 0; j < k; ++j) {
            const double d = static_cast<double>(i) - static_cast<double>(j);
            const double w = d * d / norm;
            num += w * static_cast<double>(confusion[i][j]);
            den += w * row[i] * col[j] / total;
        }
    if (den == 0.0) {
        warn("kappa: degenerate marginals; returning 0");
        return 0.0;
    }
    return 1.0 - num / den;
}

GroupBacc group_bacc(const std::vector<std::vector<std::int64_t>>& confusion,
                     const GroupSpec& groups) {
    groups.validate(static_cast<int>(confusion.size()));
    std::vector<bool> support;
    const auto recall = per_class_recall(confusion, &support);
    double sums[3] = {0, 0, 0};
    std::size_t counts[3] = {0, 0, 0};
    for (std::size_t i = 0; i < recall.size(); ++i) {
        if (!support[i]) continue;
        const auto g = static_cast<std::size_t>(groups.assignment[i]);
        sums[g] += recall[i];
        ++counts[g];
    }
    GroupBacc out;
    out.head = counts[0] ? sums[0] / static_cast<double>(counts[0]) : 0.0;
    out.medium = counts[1] ? sums[1] / static_cast<double>(counts[1]) : 0.0;
    out.tail = counts[2] ? sums[2] / static_cast<double>(counts[2]) : 0.0;
    out.overall = balanced_accuracy(confusion);
    return out;
}

MetricsReport compute_report(std::span<const int> y_true, std::span<const int> y_pred,
                             const Tensor& scores, int num_classes,
                             const GroupSpec& groups) {
    MetricsReport r;
    r.confusion = confusion_matrix(y_true, y_pred, num_classes);
    r.bacc = balanced_accuracy(r.confusion);
    const MacroPrf prf = macro_f1_precision_recall(r.confusion);
    r.f1_macro = prf.f1;
    r.precision_macro = prf.precision;
    r.recall_macro = prf.recall;
    r.auc_macro = auc_ovr_macro(scores, y_true);
    r.kappa_quadratic = quadratic_weighted_kappa(r.confusion);
    r.group_bacc = group_bacc(r.confusion, groups);
    r.n_eval = static_cast<std::int64_t>(y_true.size());
    return r;
}

namespace {

std::string f6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

std::string report_to_json(const MetricsReport& report) {
    std::ostringstream os;
    os << "{\n";
    os << "  \"auc\": " << f6(report.auc_macro) << ",\n";
    os << "  \"bacc\": " << f6(report.bacc) << ",\n";
    os << "  \"f1\": " << f6(report.f1_macro) << ",\n";
    os << "  \"kappa\": " << f6(report.kappa_quadratic) << ",\n";
    os << "  \"precision\": " << f6(report.precision_macro) << ",\n";
    os << "  \"recall\": " << f6(report.recall_macro) << ",\n";
    os << "  \"group_bacc\": {\"head\": " << f6(report.group_bacc.head)
       << ", \"medium\": " << f6(report.group_bacc.medium)
       << ", \"tail\": " << f6(report.group_bacc.tail)
       << ", \"overall\": " << f6(report.group_bacc.overall) << "},\n";
    os << "  \"confusion\": [";
    for (std::size_t i = 0; i < report.confusion.size(); ++i) {
        os << (i ? ", [" : "[");
        for (std::size_t j = 0; j < report.confusion[i].size(); ++j)
            os << (j ? ", " : "") << report.confusion[i][j];
        os << "]";
    }
    os << "],\n";
    os << "  \"n_eval\": " << report.n_eval << ",\n";
    os << "  \"seed\": " << report.seed << ",\n";
    os << "  \"config_hash\": \"" << report.config_hash << "\"\n";
    os << "}\n";
    return os.str();
}

MetricsReport report_from_json(const std::string& json_text) {
    nlohmann::json j = nlohmann::json::parse(json_text);
    MetricsReport r;
    r.auc_macro = j.at("auc").get<double>();
    r.bacc = j.at("bacc").get<double>();
    r.f1_macro = j.at("f1").get<double>();
    r.kappa_quadratic = j.at("kappa").get<double>();
    r.precision_macro = j.at("precision").get<double>();
    r.recall_macro = j.at("recall").get<double>();
    r.group_bacc.head = j.at("group_bacc").at("head").get<double>();
    r.group_bacc.medium = j.at("group_bacc").at("medium").get<double>();
    r.group_bacc.tail = j.at("group_bacc").at("tail").get<double>();
    r.group_bacc.overall = j.at("group_bacc").at("overall").get<double>();
    r.confusion = j.at("confusion").get<std::vector<std::vector<std::int64_t>>>();
    r.n_eval = j.at("n_eval").get<std::int64_t>();
    r.seed = j.at("seed").get<std::uint64_t>();
    r.config_hash = j.at("config_hash").get<std::string>();
    return r;
}

} // namespace lmd
