#include "lmd/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <sstream>

namespace lmd {

void LongTailSpec::validate() const {
    if (num_classes < 2) throw ValidationError("longtail: num_classes must be >= 2");
    if (head_count < 1) throw ValidationError("longtail: head_count must be >= 1");
    if (imbalance_factor < 1.0)
        throw ValidationError("longtail: imbalance_factor must be >= 1");
    if (feature_dim < 2) throw ValidationError("longtail: feature_dim must be >= 2");
    if (!(class_separation > 0.0))
        throw ValidationError("longtail: class_separation must be > 0");
    if (noise_dims < 0) throw ValidationError("longtail: noise_dims must be >= 0");
}

void Dataset::validate() const {
    const std::size_t n = labels.size();
    if (features.ndim() != 2 || features.rows() != n)
        throw ValidationError("dataset: features must be N x C0 with N == len(labels)");
    std::vector<int> hist(class_counts.size(), 0);
    for (int y : labels) {
        if (y < 0 || y >= num_classes())
            throw ValidationError("dataset: label out of range");
        ++hist[static_cast<std::size_t>(y)];
    }
    if (hist != class_counts)
        throw ValidationError("dataset: class_counts does not match label histogram");
}

PerturbConfig PerturbConfig::weak_defaults(std::uint64_t seed) {
    return {0.05, 0.0, 0.02, seed};
}

PerturbConfig PerturbConfig::strong_defaults(std::uint64_t seed) {
    return {0.2, 0.15, 0.1, seed};
}

void PerturbConfig::validate() const {
    if (gauss_sigma < 0.0) throw ValidationError("perturb: gauss_sigma must be >= 0");
    if (mask_prob < 0.0 || mask_prob > 1.0)
        throw ValidationError("perturb: mask_prob must be in [0, 1]");
    if (scale_jitter < 0.0) throw ValidationError("perturb: scale_jitter must be >= 0");
}

void validate_perturb_pair(const PerturbConfig& strong, const PerturbConfig& weak) {
    strong.validate();
    weak.validate();
    if (!(weak.gauss_sigma < strong.gauss_sigma && weak.mask_prob < strong.mask_prob &&
          weak.scale_jitter < strong.scale_jitter))
        throw ValidationError(
            "perturb: weak config must be strictly gentler than strong "
            "(sigma, mask_prob, scale_jitter)");
}

std::vector<int> pareto_counts(const LongTailSpec& spec) {
    spec.validate();
    const int k = spec.num_classes;
    std::vector<int> counts(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
        const double exact = spec.head_count *
            std::pow(spec.imbalance_factor, -static_cast<double>(c) / (k - 1));
        // nearbyint under the default mode rounds half to even.
        counts[static_cast<std::size_t>(c)] =
            std::max(1, static_cast<int>(std::nearbyint(exact)));
    }
    for (int c = 0; c + 1 < k; ++c)
        counts[static_cast<std::size_t>(c)] =
            std::max(counts[static_cast<std::size_t>(c)], counts[static_cast<std::size_t>(c) + 1]);
    return counts;
}

namespace {

// Class means sit on a circle in the first two informative coordinates,
// adjacent means class_separation apart; K=2 degenerates to an interval.
std::vector<std::vector<double>> class_means(const LongTailSpec& spec) {
    const int k = spec.num_classes;
    std::vector<std::vector<double>> mu(static_cast<std::size_t>(k),
                                        std::vector<double>(static_cast<std::size_t>(spec.feature_dim), 0.0));
    if (k == 2) {
        mu[0][0] = -spec.class_separation / 2.0;
        mu[1][0] = spec.class_separation / 2.0;
        return mu;
    }
    const double radius =
        spec.class_separation / (2.0 * std::sin(std::numbers::pi / k));
    for (int c = 0; c < k; ++c) {
        const double angle = 2.0 * std::numbers::pi * c / k;
        mu[static_cast<std::size_t>(c)][0] = radius * std::cos(angle);
        mu[static_cast<std::size_t>(c)][1] = radius * std::sin(angle);
    }
    return mu;
}

} // namespace

Dataset synth_longtail(const LongTailSpec& spec) {
    const std::vector<int> counts = pareto_counts(spec);
    const auto mu = class_means(spec);
    const std::size_t dim = static_cast<std::size_t>(spec.feature_dim + spec.noise_dims);
    std::size_t n = 0;
    for (int c : counts) n += static_cast<std::size_t>(c);

    Dataset ds;
    ds.features = Tensor::zeros({n, dim});
    ds.labels.reserve(n);
    ds.class_counts = counts;

    Rng rng(derive_seed(spec.seed, seed_tag("synth-longtail")));
    std::size_t row = 0;
    for (int c = 0; c < spec.num_classes; ++c) {
        for (int i = 0; i < counts[static_cast<std::size_t>(c)]; ++i, ++row) {
            double* x = &ds.features.data[row * dim];
            for (int d = 0; d < spec.feature_dim; ++d)
                x[d] = mu[static_cast<std::size_t>(c)][static_cast<std::size_t>(d)] + rng.normal();
            for (int d = 0; d < spec.noise_dims; ++d)
                x[static_cast<std::size_t>(spec.feature_dim + d)] = rng.normal();
            ds.labels.push_back(c);
        }
    }
    return ds;
}

SplitResult split(const Dataset& ds, std::array<double, 3> ratios, std::uint64_t seed) {
    double sum = 0.0;
    for (double r : ratios) {
        if (!(r > 0.0)) throw ValidationError("split: ratios must be positive");
        sum += r;
    }
    if (std::abs(sum - 1.0) > 1e-9)
        throw ValidationError("split: ratios must sum to 1");
    ds.validate();

    const int k = ds.num_classes();
    std::vector<std::vector<int>> by_class(static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
        by_class[static_cast<std::size_t>(ds.labels[i])].push_back(static_cast<int>(i));

    std::vector<int> train_idx, val_idx, test_idx;
    for (int c = 0; c < k; ++c) {
        auto& idx = by_class[static_cast<std::size_t>(c)];
        if (idx.empty()) continue;
        Rng rng(derive_seed(seed, seed_tag("split-class"), static_cast<std::uint64_t>(c)));
        rng.shuffle(idx);
        const auto n = static_cast<std::size_t>(idx.size());
        if (n < 3) {
            warn("split: class " + std::to_string(c) + " has only " + std::to_string(n) +
                 " samples; placing all in train");
            train_idx.insert(train_idx.end(), idx.begin(), idx.end());
            continue;
        }
        auto n_train = static_cast<std::size_t>(
            std::max(1.0, std::nearbyint(ratios[0] * static_cast<double>(n))));
        auto n_val = static_cast<std::size_t>(
            std::nearbyint(ratios[1] * static_cast<double>(n)));
        if (n_train > n) n_train = n;
        if (n_train + n_val > n) n_val = n - n_train;
        const std::size_t n_test = n - n_train - n_val;
        (void)n_test;
        std::sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
        std::sort(idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                  idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
        std::sort(idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), idx.end());
        train_idx.insert(train_idx.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_train));
        val_idx.insert(val_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train),
                       idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
        test_idx.insert(test_idx.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_train + n_val),
                        idx.end());
    }

    auto take = [&](const std::vector<int>& rows, Split tag) {
        Dataset out;
        const std::size_t dim = ds.dim();
        out.features = Tensor::zeros({rows.size(), dim});
        out.labels.reserve(rows.size());
        out.class_counts.assign(static_cast<std::size_t>(k), 0);
        out.split_tag = tag;
        for (std::size_t i = 0; i < rows.size(); ++i) {
            const auto r = static_cast<std::size_t>(rows[i]);
            std::copy_n(&ds.features.data[r * dim], dim, &out.features.data[i * dim]);
            out.labels.push_back(ds.labels[r]);
            ++out.class_counts[static_cast<std::size_t>(ds.labels[r])];
        }
        return out;
    };

    return {take(train_idx, Split::train), take(val_idx, Split::val),
            take(test_idx, Split::test)};
}

Tensor perturb(const Tensor& batch, const PerturbConfig& cfg, std::uint64_t batch_index) {
    cfg.validate();
    if (batch.ndim() != 2) throw ValidationError("perturb: batch must be B x C");
    Rng rng(derive_seed(cfg.seed, seed_tag("perturb"), batch_index));
    Tensor out = batch;
    const std::size_t b = batch.rows(), c = batch.cols();
    for (std::size_t i = 0; i < b; ++i) {
        const double scale = 1.0 + rng.uniform_sym(cfg.scale_jitter);
        for (std::size_t j = 0; j < c; ++j) {
            double v = out.at(i, j) + cfg.gauss_sigma * rng.normal();
            if (rng.uniform() < cfg.mask_prob) v = 0.0;
            out.at(i, j) = v * scale;
        }
    }
    return out;
}

InstanceSampler::InstanceSampler(std::size_t n, std::uint64_t seed)
    : rng_(derive_seed(seed, seed_tag("instance-sampler"))) {
    if (n == 0) throw ValidationError("sampler: empty dataset");
    order_.resize(n);
    for (std::size_t i = 0; i < n; ++i) order_[i] = static_cast<int>(i);
}

std::vector<int> InstanceSampler::next_epoch() {
    rng_.shuffle(order_);
    return order_;
}

ClassBalancedSampler::ClassBalancedSampler(const Dataset& ds, std::uint64_t seed)
    : rng_(derive_seed(seed, seed_tag("class-balanced-sampler"))) {
    by_class_.resize(static_cast<std::size_t>(ds.num_classes()));
    for (std::size_t i = 0; i < ds.labels.size(); ++i)
        by_class_[static_cast<std::size_t>(ds.labels[i])].push_back(static_cast<int>(i));
    for (std::size_t c = 0; c < by_class_.size(); ++c)
        if (by_class_[c].empty())
            throw ValidationError("class-balanced sampler: class " + std::to_string(c) +
                                  " has no samples");
}

int ClassBalancedSampler::next() {
    const auto c = static_cast<std::size_t>(rng_.below(by_class_.size()));
    const auto& pool = by_class_[c];
    return pool[static_cast<std::size_t>(rng_.below(pool.size()))];
}

std::vector<int> ClassBalancedSampler::next_batch(std::size_t batch) {
    std::vector<int> out(batch);
    for (auto& v : out) v = next();
    return out;
}

Standardizer Standardizer::fit(const Tensor& features) {
    if (features.ndim() != 2 || features.rows() == 0)
        throw ValidationError("standardizer: features must be a nonempty N x C matrix");
    const std::size_t n = features.rows(), c = features.cols();
    Standardizer s;
    s.mean.assign(c, 0.0);
    s.inv_std.assign(c, 1.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) s.mean[j] += features.at(i, j);
    for (auto& m : s.mean) m /= static_cast<double>(n);
    // Center per dimension but scale by a single pooled deviation, so the
    // relative variances of the coordinates survive normalization.
    double pooled = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j) {
            const double d = features.at(i, j) - s.mean[j];
            pooled += d * d;
        }
    const double sd = std::sqrt(pooled / static_cast<double>(n * c));
    const double inv = 1.0 / std::max(sd, 1e-8);
    for (std::size_t j = 0; j < c; ++j) s.inv_std[j] = inv;
    return s;
}

void Standardizer::apply(Tensor& features) const {
    if (features.ndim() != 2 || features.cols() != mean.size())
        throw ValidationError("standardizer: dimension mismatch");
    const std::size_t n = features.rows(), c = features.cols();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < c; ++j)
            features.at(i, j) = (features.at(i, j) - mean[j]) * inv_std[j];
}

// ============================================================
// Dataset I/O
// ============================================================

namespace {

constexpr char kMagic[4] = {'L', 'M', 'D', 'S'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xffu));
    out.push_back(static_cast<char>((v >> 8) & 0xffu));
}

void put_f32(std::string& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

struct Reader {
    const std::string& bytes;
    std::size_t pos = 0;

    void need(std::size_t n, const char* what) const {
        if (pos + n > bytes.size())
            throw DataError("dataset file truncated at byte " + std::to_string(pos) +
                            " reading " + what + ": expected " + std::to_string(pos + n) +
                            " bytes, file has " + std::to_string(bytes.size()));
    }
    std::uint32_t u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i)
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
        pos += 4;
        return v;
    }
    std::uint16_t u16(const char* what) {
        need(2, what);
        auto lo = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[pos]));
        auto hi = static_cast<std::uint16_t>(static_cast<unsigned char>(bytes[pos + 1]));
        pos += 2;
        return static_cast<std::uint16_t>(lo | (hi << 8));
    }
    float f32(const char* what) {
        const std::uint32_t bits = u32(what);
        float v;
        std::memcpy(&v, &bits, 4);
        return v;
    }
};

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() &&
           s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

void save_dataset_binary(const Dataset& ds, const std::string& path) {
    if (ds.num_classes() > 65535)
        throw ValidationError("save_dataset: binary format caps K at 65535");
    std::string out;
    out.reserve(20 + ds.size() * (ds.dim() * 4 + 2) + 4);
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<std::uint32_t>(ds.size()));
    put_u32(out, static_cast<std::uint32_t>(ds.dim()));
    put_u32(out, static_cast<std::uint32_t>(ds.num_classes()));
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim(); ++j)
            put_f32(out, static_cast<float>(ds.features.at(i, j)));
        put_u16(out, static_cast<std::uint16_t>(ds.labels[i]));
    }
    put_u32(out, crc32(out.data(), out.size()));
    write_file_atomic(path, out);
}

Dataset load_dataset_binary(const std::string& path) {
    const std::string bytes = read_file(path);
    Reader r{bytes};
    r.need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0)
        throw DataError("bad magic at byte 0 in " + path + " (not an LMDS file)");
    r.pos = 4;
    const std::uint32_t version = r.u32("version");
    if (version != kVersion)
        throw DataError("unsupported LMDS version " + std::to_string(version) +
                        " (expected " + std::to_string(kVersion) + ")");
    const std::uint32_t n = r.u32("record count");
    const std::uint32_t c0 = r.u32("feature dim");
    const std::uint32_t k = r.u32("class count");

    const std::size_t expected = 20 + static_cast<std::size_t>(n) * (c0 * 4 + 2) + 4;
    if (bytes.size() != expected)
        throw DataError("dataset file length mismatch: expected " +
                        std::to_string(expected) + " bytes, got " +
                        std::to_string(bytes.size()));

    Dataset ds;
    ds.features = Tensor::zeros({n, c0});
    ds.labels.reserve(n);
    ds.class_counts.assign(k, 0);
    for (std::uint32_t i = 0; i < n; ++i) {
        for (std::uint32_t j = 0; j < c0; ++j)
            ds.features.at(i, j) = static_cast<double>(r.f32("feature"));
        const std::uint16_t y = r.u16("label");
        if (y >= k)
            throw DataError("label " + std::to_string(y) + " out of range at byte " +
                            std::to_string(r.pos - 2));
        ds.labels.push_back(static_cast<int>(y));
        ++ds.class_counts[y];
    }
    const std::uint32_t stored = r.u32("crc32");
    const std::uint32_t computed = crc32(bytes.data(), bytes.size() - 4);
    if (stored != computed)
        throw DataError("CRC mismatch in " + path + ": stored " + std::to_string(stored) +
                        ", computed " + std::to_string(computed));
    return ds;
}

void save_dataset_csv(const Dataset& ds, const std::string& path) {
    std::string out;
    for (std::size_t j = 0; j < ds.dim(); ++j) {
        out += "f" + std::to_string(j);
        out += ",";
    }
    out += "label\n";
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        for (std::size_t j = 0; j < ds.dim(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.17g,", ds.features.at(i, j));
            out += buf;
        }
        out += std::to_string(ds.labels[i]);
        out += "\n";
    }
    write_file_atomic(path, out);
}

Dataset load_dataset_csv(const std::string& path) {
    const std::string bytes = read_file(path);
    std::istringstream in(bytes);
    std::string line;
    if (!std::getline(in, line)) throw DataError("empty CSV file: " + path);

    std::size_t c0 = 0;
    {
        std::istringstream hs(line);
        std::string tok;
        std::vector<std::string> cols;
        while (std::getline(hs, tok, ',')) cols.push_back(tok);
        if (cols.empty() || cols.back() != "label")
            throw DataError("CSV header must end with 'label': " + path);
        c0 = cols.size() - 1;
        for (std::size_t j = 0; j < c0; ++j)
            if (cols[j] != "f" + std::to_string(j))
                throw DataError("CSV header column " + std::to_string(j) +
                                " must be f" + std::to_string(j));
    }

    std::vector<double> values;
    std::vector<int> labels;
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string tok;
        std::size_t col = 0;
        while (std::getline(ls, tok, ',')) {
            try {
                if (col < c0)
                    values.push_back(std::stod(tok));
                else if (col == c0)
                    labels.push_back(std::stoi(tok));
                else
                    throw DataError("");
            } catch (const std::exception&) {
                throw DataError("CSV parse error at line " + std::to_string(lineno) +
                                " column " + std::to_string(col) + " in " + path);
            }
            ++col;
        }
        if (col != c0 + 1)
            throw DataError("CSV row at line " + std::to_string(lineno) + " has " +
                            std::to_string(col) + " fields, expected " +
                            std::to_string(c0 + 1));
    }

    Dataset ds;
    int k = 0;
    for (int y : labels) {
        if (y < 0) throw DataError("negative label in " + path);
        k = std::max(k, y + 1);
    }
    ds.features = Tensor::from({labels.size(), c0}, std::move(values));
    ds.labels = std::move(labels);
    ds.class_counts.assign(static_cast<std::size_t>(k), 0);
    for (int y : ds.labels) ++ds.class_counts[static_cast<std::size_t>(y)];
    return ds;
}

} // namespace

void save_dataset(const Dataset& ds, const std::string& path) {
    ds.validate();
    if (ends_with(path, ".csv"))
        save_dataset_csv(ds, path);
    else
        save_dataset_binary(ds, path);
}

Dataset load_dataset(const std::string& path) {
    Dataset ds = ends_with(path, ".csv") ? load_dataset_csv(path)
                                         : load_dataset_binary(path);
    ds.validate();
    return ds;
}

} // namespace lmd
