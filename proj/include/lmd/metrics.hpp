#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "lmd/tensor.hpp"

namespace lmd {

enum class Group { head, medium, tail };

// Maps every class to exactly one of head/medium/tail.
struct GroupSpec {
    std::vector<Group> assignment;

    // Tertiles by training-set frequency: most frequent third is head,
    // least frequent third is tail. Equal counts at a boundary stay with
    // the more frequent (head-ward) group; remaining ties break by index.
    static GroupSpec from_train_counts(const std::vector<int>& train_counts);
    // Text file, one "<class> <head|medium|tail>" per line.
    static GroupSpec from_file(const std::string& path, int num_classes);
    void validate(int num_classes) const;
};

struct GroupBacc {
    double head = 0.0;
    double medium = 0.0;
    double tail = 0.0;
    double overall = 0.0;
};

struct MetricsReport {
    std::vector<std::vector<std::int64_t>> confusion; // rows = true class
    double auc_macro = 0.0;
    double bacc = 0.0;
    double f1_macro = 0.0;
    double kappa_quadratic = 0.0;
    double precision_macro = 0.0;
    double recall_macro = 0.0;
    GroupBacc group_bacc;
    std::int64_t n_eval = 0;
    std::uint64_t seed = 0;
    std::string config_hash;
};

std::vector<std::vector<std::int64_t>> confusion_matrix(std::span<const int> y_true,
                                                        std::span<const int> y_pred,
                                                        int num_classes);

// Mean per-class recall; zero-support classes are skipped with a warning.
double balanced_accuracy(const std::vector<std::vector<std::int64_t>>& confusion);

struct MacroPrf {
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
};
MacroPrf macro_f1_precision_recall(const std::vector<std::vector<std::int64_t>>& confusion);

// One-vs-rest rank AUC (ties count 1/2), unweighted mean over classes
// with at least one positive and one negative.
double auc_ovr_macro(const Tensor& scores, std::span<const int> y_true);

// kappa = 1 - sum(w O) / sum(w E), w_ij = (i-j)^2/(K-1)^2, E from the
// marginal outer product scaled to sum of O.
double quadratic_weighted_kappa(const std::vector<std::vector<std::int64_t>>& confusion);

GroupBacc group_bacc(const std::vector<std::vector<std::int64_t>>& confusion,
                     const GroupSpec& groups);

// Assembles the full report from predictions and row-stochastic scores.
MetricsReport compute_report(std::span<const int> y_true, std::span<const int> y_pred,
                             const Tensor& scores, int num_classes,
                             const GroupSpec& groups);

// Fixed-order JSON with floats at 6 decimals; byte-stable for a given report.
std::string report_to_json(const MetricsReport& report);
MetricsReport report_from_json(const std::string& json_text);

} // namespace lmd
