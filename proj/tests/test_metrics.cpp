#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "lmd/metrics.hpp"
#include "test_util.hpp"

using namespace lmd;

namespace {

// O(N^2) pair-counting AUC oracle, deliberately independent of the
// rank-based implementation.
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

// Second quadratic-kappa implementation working on normalized
// probabilities instead of raw counts.
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
            const double w = d * d;
            observed += w * static_cast<double>(m[i][j]) / n;
            expected += w * pr[i] * pc[j];
        }
    return 1.0 - observed / expected;
}

std::vector<std::vector<std::int64_t>> random_confusion(Rng& rng, std::size_t k,
                                                        std::int64_t max_cell) {
    std::vector<std::vector<std::int64_t>> m(k, std::vector<std::int64_t>(k, 0));
    for (auto& row : m)
        for (auto& v : row) v = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(max_cell)));
    // Make sure the diagonal keeps the matrix non-degenerate.
    for (std::size_t i = 0; i < k; ++i) m[i][i] += 1;
    return m;
}

} // namespace

TEST_CASE("confusion matrix") {
    const std::vector<int> y_true = {0, 0, 1};
    const std::vector<int> y_pred = {0, 1, 1};
    const auto m = confusion_matrix(y_true, y_pred, 2);
    CHECK(m[0][0] == 1);
    CHECK(m[0][1] == 1);
    CHECK(m[1][0] == 0);
    CHECK(m[1][1] == 1);

    const std::vector<int> perfect = {0, 1, 2, 1};
    const auto d = confusion_matrix(perfect, perfect, 3);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j)
            CHECK(d[i][j] == (i == j ? (i == 1 ? 2 : 1) : 0));

    // Row sums equal class counts.
    std::int64_t row0 = m[0][0] + m[0][1];
    CHECK(row0 == 2);

    CHECK_THROWS_AS(confusion_matrix(y_true, std::vector<int>{0, 2, 1}, 2),
                    ValidationError);
}

TEST_CASE("balanced accuracy") {
    const std::vector<std::vector<std::int64_t>> perfect = {{3, 0}, {0, 2}};
    CHECK(balanced_accuracy(perfect) == doctest::Approx(1.0));

    const std::vector<std::vector<std::int64_t>> mixed = {{1, 1}, {0, 2}};
    CHECK(balanced_accuracy(mixed) == doctest::Approx(0.75));

    // Duplicating every sample of one class leaves per-class recall alone.
    const std::vector<std::vector<std::int64_t>> doubled = {{2, 2}, {0, 2}};
    CHECK(balanced_accuracy(doubled) == doctest::Approx(balanced_accuracy(mixed)));
}

TEST_CASE("macro precision recall f1") {
    const std::vector<std::vector<std::int64_t>> perfect = {{4, 0}, {0, 4}};
    const MacroPrf p = macro_f1_precision_recall(perfect);
    CHECK(p.f1 == doctest::Approx(1.0));
    CHECK(p.precision == doctest::Approx(1.0));
    CHECK(p.recall == doctest::Approx(1.0));

    // Class 1 never predicted: precision convention 0, F1 0.
    const std::vector<std::vector<std::int64_t>> never = {{3, 0}, {2, 0}};
    const MacroPrf q = macro_f1_precision_recall(never);
    CHECK(q.precision == doctest::Approx(0.5 * (3.0 / 5.0)));
    CHECK(q.f1 == doctest::Approx(0.5 * (2.0 * 0.6 * 1.0 / 1.6)));

    const std::vector<std::vector<std::int64_t>> half = {{1, 1}, {1, 1}};
    const MacroPrf h = macro_f1_precision_recall(half);
    CHECK(h.precision == doctest::Approx(0.5));
    CHECK(h.recall == doctest::Approx(0.5));
    CHECK(h.f1 == doctest::Approx(0.5));
}

TEST_CASE("auc basics") {
    // Perfectly separating scores.
    const Tensor scores = Tensor::from({4, 2}, {0.9, 0.1, 0.8, 0.2, 0.2, 0.8, 0.1, 0.9});
    const std::vector<int> y = {0, 0, 1, 1};
    CHECK(auc_ovr_macro(scores, y) == doctest::Approx(1.0));

    // Scores independent of labels: exactly 1/2 by the tie convention.
    const Tensor flat = Tensor::full({6, 2}, 0.5);
    const std::vector<int> y2 = {0, 1, 0, 1, 0, 1};
    CHECK(auc_ovr_macro(flat, y2) == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("auc matches the pairwise oracle on random instances") {
    Rng rng(404);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 10 + rng.below(40);
        const std::size_t k = 2 + rng.below(4);
        Tensor scores = Tensor::zeros({n, k});
        std::vector<int> y(n);
        for (std::size_t i = 0; i < n; ++i) {
            y[i] = static_cast<int>(rng.below(k));
            for (std::size_t j = 0; j < k; ++j) {
                // Coarse quantization forces plenty of ties.
                scores.at(i, j) = std::floor(rng.uniform() * 8.0) / 8.0;
            }
        }
        const double fast = auc_ovr_macro(scores, y);
        const double slow = auc_pair_oracle(scores, y);
        CHECK(std::abs(fast - slow) <= 1e-12);
    }
}

TEST_CASE("auc is invariant under strictly monotone score transforms") {
    Rng rng(7);
    const std::size_t n = 60, k = 3;
    Tensor scores = Tensor::zeros({n, k});
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(rng.below(k));
        for (std::size_t j = 0; j < k; ++j) scores.at(i, j) = rng.uniform();
    }
    const double base = auc_ovr_macro(scores, y);
    Tensor warped = scores;
    for (auto& v : warped.data) v = std::exp(3.0 * v) + 1.0;
    CHECK(auc_ovr_macro(warped, y) == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("quadratic weighted kappa") {
    const std::vector<std::vector<std::int64_t>> perfect = {{3, 0}, {0, 3}};
    CHECK(quadratic_weighted_kappa(perfect) == doctest::Approx(1.0));

    // Anti-diagonal two-class case: kappa = 1 - 10/5 = -1.
    const std::vector<std::vector<std::int64_t>> anti = {{0, 5}, {5, 0}};
    CHECK(quadratic_weighted_kappa(anti) == doctest::Approx(-1.0));

    Rng rng(12);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t k = 2 + rng.below(5);
        const auto m = random_confusion(rng, k, 20);
        CHECK(std::abs(quadratic_weighted_kappa(m) - kappa_oracle(m)) <= 1e-12);
    }
}

TEST_CASE("group bacc") {
    const std::vector<std::vector<std::int64_t>> m = {{8, 2, 0}, {1, 3, 0}, {0, 1, 1}};
    GroupSpec all_one;
    all_one.assignment = {Group::head, Group::head, Group::head};
    const GroupBacc g = group_bacc(m, all_one);
    CHECK(g.head == doctest::Approx(balanced_accuracy(m)));
    CHECK(g.overall == doctest::Approx(balanced_accuracy(m)));

    GroupSpec singleton;
    singleton.assignment = {Group::head, Group::medium, Group::tail};
    const GroupBacc s = group_bacc(m, singleton);
    CHECK(s.head == doctest::Approx(0.8));
    CHECK(s.medium == doctest::Approx(0.75));
    CHECK(s.tail == doctest::Approx(0.5));
    // Count-weighted recombination gives back the overall mean.
    CHECK((s.head + s.medium + s.tail) / 3.0 == doctest::Approx(s.overall));
}

TEST_CASE("group spec from training counts") {
    // 8 classes, descending counts: 3 head / 2 medium / 3 tail.
    const GroupSpec spec =
        GroupSpec::from_train_counts({1000, 518, 268, 139, 72, 37, 19, 10});
    CHECK(spec.assignment[0] == Group::head);
    CHECK(spec.assignment[1] == Group::head);
    CHECK(spec.assignment[2] == Group::head);
    CHECK(spec.assignment[3] == Group::medium);
    CHECK(spec.assignment[4] == Group::medium);
    CHECK(spec.assignment[5] == Group::tail);
    CHECK(spec.assignment[6] == Group::tail);
    CHECK(spec.assignment[7] == Group::tail);

    // Tied counts at a tertile boundary stay in the head-ward group.
    const GroupSpec tied = GroupSpec::from_train_counts({100, 50, 50, 50, 10, 5});
    CHECK(tied.assignment[1] == tied.assignment[2]);
    CHECK(tied.assignment[2] == tied.assignment[3]);
}

TEST_CASE("group spec from an explicit assignment file") {
    const std::string path =
        (std::filesystem::temp_directory_path() / "lmd_groups.txt").string();
    write_file_atomic(path, "0 head\n1 medium\n2 tail\n3 tail\n");
    const GroupSpec spec = GroupSpec::from_file(path, 4);
    CHECK(spec.assignment[0] == Group::head);
    CHECK(spec.assignment[1] == Group::medium);
    CHECK(spec.assignment[2] == Group::tail);
    CHECK(spec.assignment[3] == Group::tail);

    write_file_atomic(path, "0 head\n1 medium\n"); // class 2,3 missing
    CHECK_THROWS_AS(GroupSpec::from_file(path, 4), ValidationError);
    write_file_atomic(path, "0 head\n1 nonsense\n2 tail\n3 tail\n");
    CHECK_THROWS_AS(GroupSpec::from_file(path, 4), ValidationError);
    std::filesystem::remove(path);
}

TEST_CASE("scalar metrics are invariant under a consistent class permutation") {
    Rng rng(88);
    const std::size_t n = 200, k = 4;
    Tensor scores = Tensor::zeros({n, k});
    std::vector<int> y(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(rng.below(k));
        pred[i] = static_cast<int>(rng.below(k));
        double s = 0.0;
        for (std::size_t j = 0; j < k; ++j) {
            scores.at(i, j) = rng.uniform() + 1e-3;
            s += scores.at(i, j);
        }
        for (std::size_t j = 0; j < k; ++j) scores.at(i, j) /= s;
    }
    GroupSpec groups;
    groups.assignment = {Group::head, Group::head, Group::medium, Group::tail};

    const std::vector<int> perm = {2, 0, 3, 1};
    std::vector<int> py(n), ppred(n);
    Tensor pscores = Tensor::zeros({n, k});
    for (std::size_t i = 0; i < n; ++i) {
        py[i] = perm[static_cast<std::size_t>(y[i])];
        ppred[i] = perm[static_cast<std::size_t>(pred[i])];
        for (std::size_t j = 0; j < k; ++j)
            pscores.at(i, static_cast<std::size_t>(perm[j])) = scores.at(i, j);
    }
    GroupSpec pgroups;
    pgroups.assignment.resize(k);
    for (std::size_t j = 0; j < k; ++j)
        pgroups.assignment[static_cast<std::size_t>(perm[j])] = groups.assignment[j];

    const MetricsReport a = compute_report(y, pred, scores, static_cast<int>(k), groups);
    const MetricsReport b =
        compute_report(py, ppred, pscores, static_cast<int>(k), pgroups);
    CHECK(a.bacc == doctest::Approx(b.bacc).epsilon(1e-12));
    CHECK(a.auc_macro == doctest::Approx(b.auc_macro).epsilon(1e-12));
    CHECK(a.f1_macro == doctest::Approx(b.f1_macro).epsilon(1e-12));
    CHECK(a.precision_macro == doctest::Approx(b.precision_macro).epsilon(1e-12));
    CHECK(a.recall_macro == doctest::Approx(b.recall_macro).epsilon(1e-12));
    CHECK(a.group_bacc.head == doctest::Approx(b.group_bacc.head).epsilon(1e-12));
    CHECK(a.group_bacc.tail == doctest::Approx(b.group_bacc.tail).epsilon(1e-12));
    // Kappa weights depend on class indices, so it is deliberately excluded.

    CHECK(a.bacc >= 0.0);
    CHECK(a.bacc <= 1.0);
    CHECK(a.auc_macro >= 0.0);
    CHECK(a.auc_macro <= 1.0);
    CHECK(a.kappa_quadratic >= -1.0);
    CHECK(a.kappa_quadratic <= 1.0);
}

TEST_CASE("uniform random predictor lands near 1/K") {
    Rng rng(321);
    const std::size_t n = 100000, k = 5;
    std::vector<int> y(n), pred(n);
    for (std::size_t i = 0; i < n; ++i) {
        y[i] = static_cast<int>(i % k); // balanced truth
        pred[i] = static_cast<int>(rng.below(k));
    }
    const double bacc = balanced_accuracy(confusion_matrix(y, pred, static_cast<int>(k)));
    const double p = 1.0 / static_cast<double>(k);
    const double per_class_n = static_cast<double>(n) / static_cast<double>(k);
    const double se = std::sqrt(p * (1.0 - p) / per_class_n / static_cast<double>(k));
    CHECK(std::abs(bacc - p) <= 3.0 * se);
}

TEST_CASE("report json format and round trip") {
    MetricsReport r;
    r.confusion = {{2, 1}, {0, 3}};
    r.auc_macro = 0.875;
    r.bacc = 0.8333333333;
    r.f1_macro = 0.8;
    r.kappa_quadratic = 0.6666667;
    r.precision_macro = 0.81;
    r.recall_macro = 0.83;
    r.group_bacc = {0.9, 0.8, 0.7, 0.8333333333};
    r.n_eval = 6;
    r.seed = 42;
    r.config_hash = "deadbeefdeadbeef";

    const std::string json = report_to_json(r);
    CHECK(json.find("\"auc\": 0.875000") != std::string::npos);
    CHECK(json.find("\"bacc\": 0.833333") != std::string::npos);
    CHECK(json.find("\"config_hash\": \"deadbeefdeadbeef\"") != std::string::npos);
    CHECK(report_to_json(r) == json); // byte-stable

    const MetricsReport back = report_from_json(json);
    CHECK(back.confusion == r.confusion);
    CHECK(back.n_eval == 6);
    CHECK(back.seed == 42);
    CHECK(back.auc_macro == doctest::Approx(0.875).epsilon(1e-9));
}
