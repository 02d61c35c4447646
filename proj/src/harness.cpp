#include "lmd/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <sstream>
#include <thread>

#include <json.hpp>

namespace lmd {

namespace {

const std::vector<std::string> kAblationNames = {"no_rrl", "no_icc", "no_vfc", "no_fdc"};
const std::vector<std::string> kBaselineNames = {"ce", "rs", "decoupling"};

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

std::vector<std::string> split_csv(const std::string& s) {
    std::vector<std::string> out;
    std::string tok;
    std::istringstream is(s);
    while (std::getline(is, tok, ',')) out.push_back(tok);
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const double d = std::stod(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ValidationError("config: bad number for " + key + ": '" + v + "'");
    }
}

long long parse_int(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const long long i = std::stoll(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ValidationError("config: bad integer for " + key + ": '" + v + "'");
    }
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t used = 0;
        const std::uint64_t i = std::stoull(v, &used);
        if (used != v.size()) throw std::invalid_argument(v);
        return i;
    } catch (const std::exception&) {
        throw ValidationError("config: bad unsigned integer for " + key + ": '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError("config: bad boolean for " + key + ": '" + v + "'");
}

} // namespace

void RunConfig::validate() const {
    if (!ablations.empty() && !baseline.empty())
        throw ValidationError("config: ablations and baseline are mutually exclusive");
    if (seeds.empty()) throw ValidationError("config: at least one seed is required");
    for (const auto& a : ablations)
        if (std::find(kAblationNames.begin(), kAblationNames.end(), a) ==
            kAblationNames.end())
            throw ValidationError("config: unknown ablation '" + a + "'");
    if (!baseline.empty() &&
        std::find(kBaselineNames.begin(), kBaselineNames.end(), baseline) ==
            kBaselineNames.end())
        throw ValidationError("config: unknown baseline '" + baseline + "'");
    if (data_path.empty()) gen.validate();
    if (feature_dim == 0) throw ValidationError("config: model.feature_dim must be > 0");
    stage1.validate();
    stage2.validate();
}

bool RunConfig::has_ablation(const std::string& name) const {
    return std::find(ablations.begin(), ablations.end(), name) != ablations.end();
}

void apply_override(RunConfig& cfg, const std::string& key, const std::string& value) {
    if (key == "data.path") cfg.data_path = value;
    else if (key == "data.gen.classes") cfg.gen.num_classes = static_cast<int>(parse_int(key, value));
    else if (key == "data.gen.n0") cfg.gen.head_count = static_cast<int>(parse_int(key, value));
    else if (key == "data.gen.imbalance") cfg.gen.imbalance_factor = parse_double(key, value);
    else if (key == "data.gen.dim") cfg.gen.feature_dim = static_cast<int>(parse_int(key, value));
    else if (key == "data.gen.noise_dims") cfg.gen.noise_dims = static_cast<int>(parse_int(key, value));
    else if (key == "data.gen.sep") cfg.gen.class_separation = parse_double(key, value);
    else if (key == "data.gen.seed") cfg.gen.seed = parse_u64(key, value);
    else if (key == "data.split") {
        const auto parts = split_csv(value);
        if (parts.size() != 3)
            throw ValidationError("config: data.split needs three ratios");
        for (std::size_t i = 0; i < 3; ++i)
            cfg.split_ratios[i] = parse_double(key, parts[i]);
    }
    else if (key == "data.split_seed") cfg.split_seed = parse_u64(key, value);
    else if (key == "model.hidden") {
        cfg.hidden.clear();
        for (const auto& p : split_csv(value))
            cfg.hidden.push_back(static_cast<std::size_t>(parse_int(key, p)));
    }
    else if (key == "model.feature_dim") cfg.feature_dim = static_cast<std::size_t>(parse_int(key, value));
    else if (key == "stage1.lambda1") cfg.stage1.lambda1 = parse_double(key, value);
    else if (key == "stage1.epochs") cfg.stage1.epochs = static_cast<int>(parse_int(key, value));
    else if (key == "stage1.batch_size") cfg.stage1.batch_size = static_cast<int>(parse_int(key, value));
    else if (key == "stage1.lr") cfg.stage1.lr = parse_double(key, value);
    else if (key == "stage1.ema_momentum") cfg.stage1.ema_momentum = parse_double(key, value);
    else if (key == "stage1.clip") cfg.stage1.max_grad_norm = parse_double(key, value);
    else if (key == "stage1.kl_student_first") cfg.stage1.kl_student_first = parse_bool(key, value);
    else if (key == "stage1.ce_on_strong_view") cfg.stage1.ce_on_strong_view = parse_bool(key, value);
    else if (key == "stage1.strong.sigma") cfg.stage1.perturb_strong.gauss_sigma = parse_double(key, value);
    else if (key == "stage1.strong.mask") cfg.stage1.perturb_strong.mask_prob = parse_double(key, value);
    else if (key == "stage1.strong.jitter") cfg.stage1.perturb_strong.scale_jitter = parse_double(key, value);
    else if (key == "stage1.weak.sigma") cfg.stage1.perturb_weak.gauss_sigma = parse_double(key, value);
    else if (key == "stage1.weak.mask") cfg.stage1.perturb_weak.mask_prob = parse_double(key, value);
    else if (key == "stage1.weak.jitter") cfg.stage1.perturb_weak.scale_jitter = parse_double(key, value);
    else if (key == "stage2.iters") cfg.stage2.iterations = static_cast<int>(parse_int(key, value));
    else if (key == "stage2.r_virtual") cfg.stage2.r_virtual = parse_int(key, value);
    else if (key == "stage2.lambda_e") cfg.stage2.lambda_e = parse_double(key, value);
    else if (key == "stage2.lr_classifier") cfg.stage2.lr_classifier = parse_double(key, value);
    else if (key == "stage2.lr_encoder") cfg.stage2.lr_encoder = parse_double(key, value);
    else if (key == "stage2.m_epochs") cfg.stage2.m_epochs = static_cast<int>(parse_int(key, value));
    else if (key == "stage2.e_epochs") cfg.stage2.e_epochs = static_cast<int>(parse_int(key, value));
    else if (key == "stage2.batch_size") cfg.stage2.batch_size = static_cast<int>(parse_int(key, value));
    else if (key == "stage2.mahalanobis_mode") {
        if (value == "inverse") cfg.stage2.mahalanobis_mode = MahalanobisMode::inverse;
        else if (value == "as_printed") cfg.stage2.mahalanobis_mode = MahalanobisMode::as_printed;
        else throw ValidationError("config: stage2.mahalanobis_mode must be inverse|as_printed");
    }
    else if (key == "stage2.e_step_sampling" || key == "stage2.m_step_stats_sampling") {
        SamplingMode mode;
        if (value == "uniform") mode = SamplingMode::uniform;
        else if (value == "class_balanced") mode = SamplingMode::class_balanced;
        else throw ValidationError("config: " + key + " must be uniform|class_balanced");
        if (key == "stage2.e_step_sampling") cfg.stage2.e_step_sampling = mode;
        else cfg.stage2.m_step_stats_sampling = mode;
    }
    else if (key == "stage2.moment_momentum") cfg.stage2.moment_momentum = parse_double(key, value);
    else if (key == "stage2.ridge") cfg.stage2.ridge = parse_double(key, value);
    else if (key == "stage2.clip") cfg.stage2.max_grad_norm = parse_double(key, value);
    else if (key == "metrics.groups_file") cfg.groups_file = value;
    else if (key == "ablations") {
        cfg.ablations.clear();
        if (!value.empty() && value != "none")
            for (const auto& p : split_csv(value)) cfg.ablations.push_back(p);
    }
    else if (key == "baseline") cfg.baseline = (value == "none") ? "" : value;
    else if (key == "seeds") {
        cfg.seeds.clear();
        for (const auto& p : split_csv(value)) cfg.seeds.push_back(parse_u64(key, p));
    }
    else if (key == "out") cfg.out_dir = value;
    else throw ValidationError("config: unknown key '" + key + "'");
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        // Trim whitespace at both ends.
        const auto b = line.find_first_not_of(" \t\r");
        if (b == std::string::npos) continue;
        const auto e = line.find_last_not_of(" \t\r");
        line = line.substr(b, e - b + 1);
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ValidationError("config line " + std::to_string(lineno) +
                                  ": expected key=value");
        apply_override(cfg, line.substr(0, eq), line.substr(eq + 1));
    }
    return cfg;
}

RunConfig parse_config_file(const std::string& path) {
    return parse_config_text(read_file(path));
}

namespace {

std::string join_list(const std::vector<std::string>& parts) {
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (i) out += ",";
        out += parts[i];
    }
    return out;
}

std::string serialize_config_masked(const RunConfig& cfg, bool mask_switch,
                                    bool mask_out = false) {
    std::ostringstream os;
    os << "data.path=" << cfg.data_path << "\n";
    os << "data.gen.classes=" << cfg.gen.num_classes << "\n";
    os << "data.gen.n0=" << cfg.gen.head_count << "\n";
    os << "data.gen.imbalance=" << fmt_double(cfg.gen.imbalance_factor) << "\n";
    os << "data.gen.dim=" << cfg.gen.feature_dim << "\n";
    os << "data.gen.noise_dims=" << cfg.gen.noise_dims << "\n";
    os << "data.gen.sep=" << fmt_double(cfg.gen.class_separation) << "\n";
    os << "data.gen.seed=" << cfg.gen.seed << "\n";
    os << "data.split=" << fmt_double(cfg.split_ratios[0]) << ","
       << fmt_double(cfg.split_ratios[1]) << "," << fmt_double(cfg.split_ratios[2]) << "\n";
    os << "data.split_seed=" << cfg.split_seed << "\n";
    os << "model.hidden=";
    for (std::size_t i = 0; i < cfg.hidden.size(); ++i)
        os << (i ? "," : "") << cfg.hidden[i];
    os << "\n";
    os << "model.feature_dim=" << cfg.feature_dim << "\n";
    os << "stage1.lambda1=" << fmt_double(cfg.stage1.lambda1) << "\n";
    os << "stage1.epochs=" << cfg.stage1.epochs << "\n";
    os << "stage1.batch_size=" << cfg.stage1.batch_size << "\n";
    os << "stage1.lr=" << fmt_double(cfg.stage1.lr) << "\n";
    os << "stage1.ema_momentum=" << fmt_double(cfg.stage1.ema_momentum) << "\n";
    os << "stage1.clip=" << fmt_double(cfg.stage1.max_grad_norm) << "\n";
    os << "stage1.kl_student_first=" << (cfg.stage1.kl_student_first ? "true" : "false") << "\n";
    os << "stage1.ce_on_strong_view=" << (cfg.stage1.ce_on_strong_view ? "true" : "false") << "\n";
    os << "stage1.strong.sigma=" << fmt_double(cfg.stage1.perturb_strong.gauss_sigma) << "\n";
    os << "stage1.strong.mask=" << fmt_double(cfg.stage1.perturb_strong.mask_prob) << "\n";
    os << "stage1.strong.jitter=" << fmt_double(cfg.stage1.perturb_strong.scale_jitter) << "\n";
    os << "stage1.weak.sigma=" << fmt_double(cfg.stage1.perturb_weak.gauss_sigma) << "\n";
    os << "stage1.weak.mask=" << fmt_double(cfg.stage1.perturb_weak.mask_prob) << "\n";
    os << "stage1.weak.jitter=" << fmt_double(cfg.stage1.perturb_weak.scale_jitter) << "\n";
    os << "stage2.iters=" << cfg.stage2.iterations << "\n";
    os << "stage2.r_virtual=" << cfg.stage2.r_virtual << "\n";
    os << "stage2.lambda_e=" << fmt_double(cfg.stage2.lambda_e) << "\n";
    os << "stage2.lr_classifier=" << fmt_double(cfg.stage2.lr_classifier) << "\n";
    os << "stage2.lr_encoder=" << fmt_double(cfg.stage2.lr_encoder) << "\n";
    os << "stage2.m_epochs=" << cfg.stage2.m_epochs << "\n";
    os << "stage2.e_epochs=" << cfg.stage2.e_epochs << "\n";
    os << "stage2.batch_size=" << cfg.stage2.batch_size << "\n";
    os << "stage2.mahalanobis_mode="
       << (cfg.stage2.mahalanobis_mode == MahalanobisMode::inverse ? "inverse" : "as_printed")
       << "\n";
    os << "stage2.e_step_sampling="
       << (cfg.stage2.e_step_sampling == SamplingMode::uniform ? "uniform" : "class_balanced")
       << "\n";
    os << "stage2.m_step_stats_sampling="
       << (cfg.stage2.m_step_stats_sampling == SamplingMode::uniform ? "uniform"
                                                                     : "class_balanced")
       << "\n";
    os << "stage2.moment_momentum=" << fmt_double(cfg.stage2.moment_momentum) << "\n";
    os << "stage2.ridge=" << fmt_double(cfg.stage2.ridge) << "\n";
    os << "stage2.clip=" << fmt_double(cfg.stage2.max_grad_norm) << "\n";
    os << "metrics.groups_file=" << cfg.groups_file << "\n";
    if (mask_switch) {
        os << "ablations=<masked>\n";
        os << "baseline=<masked>\n";
    } else {
        os << "ablations=" << join_list(cfg.ablations) << "\n";
        os << "baseline=" << cfg.baseline << "\n";
    }
    os << "seeds=";
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
        os << (i ? "," : "") << cfg.seeds[i];
    os << "\n";
    os << "out=" << (mask_out ? "<masked>" : cfg.out_dir) << "\n";
    return os.str();
}

} // namespace

std::string serialize_config(const RunConfig& cfg) {
    return serialize_config_masked(cfg, false);
}

// Hashes identify the experiment, so the output directory is masked out.
std::string config_hash(const RunConfig& cfg) {
    const std::string s = serialize_config_masked(cfg, false, true);
    return hex64(fnv1a64(s.data(), s.size()));
}

std::string shared_config_hash(const RunConfig& cfg) {
    const std::string s = serialize_config_masked(cfg, true, true);
    return hex64(fnv1a64(s.data(), s.size()));
}

// ============================================================
// Checkpoints
// ============================================================

namespace {

constexpr char kCkptMagic[4] = {'L', 'M', 'D', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xffu));
}

void put_f64(std::string& out, double v) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    for (int i = 0; i < 8; ++i)
        out.push_back(static_cast<char>((bits >> (8 * i)) & 0xffu));
}

std::uint32_t get_u32(const std::string& bytes, std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
        v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
    return v;
}

double get_f64(const std::string& bytes, std::size_t pos) {
    std::uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + static_cast<std::size_t>(i)])) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
}

struct SetRef {
    const char* prefix;
    const ParamSet* set;
};

std::vector<SetRef> set_refs(const ModelState& state) {
    return {{"encoder/", &state.encoder},
            {"classifier/", &state.classifier},
            {"teacher_encoder/", &state.teacher_encoder},
            {"teacher_classifier/", &state.teacher_classifier}};
}

} // namespace

void save_checkpoint(const ModelState& state, const std::string& path,
                     const CheckpointMeta& meta) {
    nlohmann::json manifest;
    manifest["version"] = kCkptVersion;
    manifest["stage"] = meta.stage;
    manifest["seed"] = meta.seed;
    manifest["config_hash"] = meta.config_hash;
    manifest["ema_momentum"] = state.ema_momentum;
    manifest["arch"] = {{"input_dim", state.arch.input_dim},
                        {"hidden", state.arch.hidden},
                        {"feature_dim", state.arch.feature_dim},
                        {"num_classes", state.arch.num_classes}};
    nlohmann::json tensors = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& ref : set_refs(state))
        for (const auto& it : ref.set->items) {
            tensors.push_back({{"name", std::string(ref.prefix) + it.name},
                               {"shape", it.tensor.shape},
                               {"offset", offset}});
            offset += it.tensor.size();
        }
    manifest["tensors"] = std::move(tensors);
    const std::string mtext = manifest.dump();

    std::string out;
    out.append(kCkptMagic, 4);
    put_u32(out, kCkptVersion);
    put_u32(out, static_cast<std::uint32_t>(mtext.size()));
    out += mtext;
    for (const auto& ref : set_refs(state))
        for (const auto& it : ref.set->items)
            for (double v : it.tensor.data) put_f64(out, v);
    put_u32(out, crc32(out.data(), out.size()));
    write_file_atomic(path, out);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    const std::string bytes = read_file(path);
    if (bytes.size() < 16)
        throw DataError("checkpoint truncated: " + path + " has " +
                        std::to_string(bytes.size()) + " bytes");
    if (std::memcmp(bytes.data(), kCkptMagic, 4) != 0)
        throw DataError("bad magic at byte 0 in " + path + " (not an LMDC file)");
    const std::uint32_t version = get_u32(bytes, 4);
    if (version != kCkptVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version));
    const std::uint32_t mlen = get_u32(bytes, 8);
    if (bytes.size() < 12 + static_cast<std::size_t>(mlen) + 4)
        throw DataError("checkpoint truncated reading manifest: " + path);

    const std::uint32_t stored = get_u32(bytes, bytes.size() - 4);
    const std::uint32_t computed = crc32(bytes.data(), bytes.size() - 4);
    if (stored != computed)
        throw DataError("CRC mismatch in " + path + ": stored " + std::to_string(stored) +
                        ", computed " + std::to_string(computed) +
                        " (corruption at or before byte " + std::to_string(bytes.size() - 4) + ")");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(12, mlen));
    } catch (const std::exception& e) {
        throw DataError("checkpoint manifest parse error: " + std::string(e.what()));
    }

    LoadedCheckpoint out;
    out.meta.stage = manifest.at("stage").get<std::string>();
    out.meta.seed = manifest.at("seed").get<std::uint64_t>();
    out.meta.config_hash = manifest.at("config_hash").get<std::string>();
    out.state.ema_momentum = manifest.at("ema_momentum").get<double>();
    const auto& arch = manifest.at("arch");
    out.state.arch.input_dim = arch.at("input_dim").get<std::size_t>();
    out.state.arch.hidden = arch.at("hidden").get<std::vector<std::size_t>>();
    out.state.arch.feature_dim = arch.at("feature_dim").get<std::size_t>();
    out.state.arch.num_classes = arch.at("num_classes").get<std::size_t>();

    const std::size_t blob_begin = 12 + mlen;
    const std::size_t blob_len = bytes.size() - 4 - blob_begin;
    if (blob_len % 8 != 0)
        throw DataError("checkpoint blob length " + std::to_string(blob_len) +
                        " is not a multiple of 8");
    const std::size_t blob_count = blob_len / 8;

    for (const auto& jt : manifest.at("tensors")) {
        const std::string name = jt.at("name").get<std::string>();
        const auto shape = jt.at("shape").get<std::vector<std::size_t>>();
        const auto offset = jt.at("offset").get<std::size_t>();
        std::size_t count = 1;
        for (auto d : shape) count *= d;
        if (offset + count > blob_count)
            throw DataError("checkpoint tensor " + name + " extends past blob end");
        Tensor t = Tensor::zeros(shape);
        for (std::size_t i = 0; i < count; ++i)
            t.data[i] = get_f64(bytes, blob_begin + (offset + i) * 8);
        check_finite(t.data, "checkpoint tensor");

        const std::size_t slash = name.find('/');
        if (slash == std::string::npos)
            throw DataError("checkpoint tensor name lacks a set prefix: " + name);
        const std::string set = name.substr(0, slash);
        const std::string local = name.substr(slash + 1);
        ParamSet* target = nullptr;
        if (set == "encoder") target = &out.state.encoder;
        else if (set == "classifier") target = &out.state.classifier;
        else if (set == "teacher_encoder") target = &out.state.teacher_encoder;
        else if (set == "teacher_classifier") target = &out.state.teacher_classifier;
        else throw DataError("checkpoint tensor set unknown: " + set);
        target->items.push_back({local, std::move(t)});
    }
    return out;
}

LoadedCheckpoint load_checkpoint(const std::string& path, const ModelConfig& expected) {
    LoadedCheckpoint loaded = load_checkpoint(path);
    const ModelState ref = init_model(expected, 0);
    for (const auto& pair :
         {std::pair{&loaded.state.encoder, &ref.encoder},
          std::pair{&loaded.state.classifier, &ref.classifier},
          std::pair{&loaded.state.teacher_encoder, &ref.teacher_encoder},
          std::pair{&loaded.state.teacher_classifier, &ref.teacher_classifier}}) {
        const ParamSet* got = pair.first;
        const ParamSet* want = pair.second;
        if (got->items.size() != want->items.size())
            throw StateError("checkpoint has " + std::to_string(got->items.size()) +
                             " tensors in a set where the model expects " +
                             std::to_string(want->items.size()));
        for (std::size_t i = 0; i < got->items.size(); ++i) {
            if (got->items[i].name != want->items[i].name ||
                !got->items[i].tensor.same_shape(want->items[i].tensor))
                throw StateError("checkpoint tensor " + got->items[i].name + " has shape " +
                                 got->items[i].tensor.shape_str() + ", model expects " +
                                 want->items[i].name + " " +
                                 want->items[i].tensor.shape_str());
        }
    }
    return loaded;
}

// ============================================================
// Evaluation, aggregation, export
// ============================================================

MetricsReport evaluate_model(const ModelState& state, const Dataset& eval_ds,
                             const GroupSpec& groups, std::uint64_t seed,
                             const std::string& cfg_hash) {
    const EvalOutput out = predict(state, eval_ds.features);
    MetricsReport report = compute_report(eval_ds.labels, out.preds, out.scores,
                                          eval_ds.num_classes(), groups);
    report.seed = seed;
    report.config_hash = cfg_hash;
    return report;
}

namespace {

AggregateStat stat_of(const std::vector<double>& xs) {
    AggregateStat s;
    const auto n = static_cast<double>(xs.size());
    for (double x : xs) s.mean += x;
    s.mean /= n;
    if (xs.size() > 1) {
        double sq = 0.0;
        for (double x : xs) sq += (x - s.mean) * (x - s.mean);
        s.std_dev = std::sqrt(sq / (n - 1.0));
    }
    return s;
}

} // namespace

AggregateReport aggregate_reports(const std::vector<MetricsReport>& reports) {
    if (reports.empty()) throw ValidationError("aggregate: no reports");
    auto collect = [&](auto getter) {
        std::vector<double> xs;
        xs.reserve(reports.size());
        for (const auto& r : reports) xs.push_back(getter(r));
        return stat_of(xs);
    };
    AggregateReport agg;
    agg.auc = collect([](const MetricsReport& r) { return r.auc_macro; });
    agg.bacc = collect([](const MetricsReport& r) { return r.bacc; });
    agg.f1 = collect([](const MetricsReport& r) { return r.f1_macro; });
    agg.kappa = collect([](const MetricsReport& r) { return r.kappa_quadratic; });
    agg.precision = collect([](const MetricsReport& r) { return r.precision_macro; });
    agg.recall = collect([](const MetricsReport& r) { return r.recall_macro; });
    agg.head = collect([](const MetricsReport& r) { return r.group_bacc.head; });
    agg.medium = collect([](const MetricsReport& r) { return r.group_bacc.medium; });
    agg.tail = collect([](const MetricsReport& r) { return r.group_bacc.tail; });
    agg.n_seeds = static_cast<int>(reports.size());
    return agg;
}

namespace {

std::string f6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void emit_stat(std::ostringstream& os, const char* name, const AggregateStat& s,
               bool last = false) {
    os << "  \"" << name << "\": {\"mean\": " << f6(s.mean) << ", \"std\": "
       << f6(s.std_dev) << "}" << (last ? "\n" : ",\n");
}

} // namespace

std::string aggregate_to_json(const AggregateReport& agg) {
    std::ostringstream os;
    os << "{\n";
    os << "  \"n_seeds\": " << agg.n_seeds << ",\n";
    emit_stat(os, "auc", agg.auc);
    emit_stat(os, "bacc", agg.bacc);
    emit_stat(os, "f1", agg.f1);
    emit_stat(os, "kappa", agg.kappa);
    emit_stat(os, "precision", agg.precision);
    emit_stat(os, "recall", agg.recall);
    emit_stat(os, "head_bacc", agg.head);
    emit_stat(os, "medium_bacc", agg.medium);
    emit_stat(os, "tail_bacc", agg.tail, true);
    os << "}\n";
    return os.str();
}

void export_features(const ModelState& state, const Dataset& ds, const std::string& path) {
    const Tensor z = encoder_forward_value(ds.features, state.encoder);
    std::string out;
    for (std::size_t j = 0; j < z.cols(); ++j) out += "z" + std::to_string(j) + ",";
    out += "label\n";
    char buf[64];
    for (std::size_t i = 0; i < z.rows(); ++i) {
        for (std::size_t j = 0; j < z.cols(); ++j) {
            std::snprintf(buf, sizeof(buf), "%.10g,", z.at(i, j));
            out += buf;
        }
        out += std::to_string(ds.labels[i]);
        out += "\n";
    }
    write_file_atomic(path, out);
}

// ============================================================
// Pipelines
// ============================================================

namespace {

// Decoupling second stage: classifier re-initialized and retrained on
// frozen real features under class-balanced resampling.
void decoupling_stage2(const Dataset& train, ModelState& state, const IccConfig& cfg) {
    state.classifier =
        init_classifier(state.arch, derive_seed(cfg.seed, seed_tag("f0-reinit")));
    const Tensor feats = encoder_forward_value(train.features, state.encoder);
    ClassBalancedSampler sampler(train, derive_seed(cfg.seed, seed_tag("decoupling-sampler")));
    const SgdConfig sgd{cfg.lr_classifier, std::nullopt};
    const int epochs = cfg.iterations * cfg.m_epochs;
    for (int epoch = 0; epoch < epochs; ++epoch) {
        const std::vector<int> order = sampler.next_batch(train.size());
        for (std::size_t off = 0; off < order.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
            Tensor bx = Tensor::zeros({end - off, feats.cols()});
            std::vector<int> by(end - off);
            for (std::size_t i = off; i < end; ++i) {
                const auto row = static_cast<std::size_t>(order[i]);
                std::copy_n(&feats.data[row * feats.cols()], feats.cols(),
                            &bx.data[(i - off) * feats.cols()]);
                by[i - off] = train.labels[row];
            }
            Graph g;
            Graph::Node v = g.constant(bx);
            Graph::Node logits = classifier_forward(g, v, state.classifier, true);
            Graph::Node ce = g.cross_entropy(logits, by);
            g.backward(ce);
            sgd_step(state, ParamGroup::classifier, sgd);
        }
    }
}

Dataset dataset_for_seed(const RunConfig& cfg, std::uint64_t seed) {
    if (!cfg.data_path.empty()) return load_dataset(cfg.data_path);
    LongTailSpec spec = cfg.gen;
    spec.seed = derive_seed(cfg.gen.seed, seed_tag("per-seed-data"), seed);
    return synth_longtail(spec);
}

} // namespace

PreparedData prepare_data(const RunConfig& cfg, const Dataset& ds, std::uint64_t seed) {
    PreparedData out;
    out.parts =
        split(ds, cfg.split_ratios, derive_seed(cfg.split_seed, seed_tag("split"), seed));
    out.norm = Standardizer::fit(out.parts.train.features);
    out.norm.apply(out.parts.train);
    out.norm.apply(out.parts.val);
    out.norm.apply(out.parts.test);
    return out;
}

ModelConfig arch_for(const RunConfig& cfg, const Dataset& ds) {
    ModelConfig arch;
    arch.input_dim = ds.dim();
    arch.hidden = cfg.hidden;
    arch.feature_dim = cfg.feature_dim;
    arch.num_classes = static_cast<std::size_t>(ds.num_classes());
    return arch;
}

Stage1Config stage1_for_run(const RunConfig& cfg, std::uint64_t seed) {
    Stage1Config s1 = cfg.stage1;
    s1.seed = derive_seed(seed, seed_tag("stage1-run"));
    return s1;
}

IccConfig stage2_for_run(const RunConfig& cfg, std::uint64_t seed) {
    IccConfig s2 = cfg.stage2;
    s2.seed = derive_seed(seed, seed_tag("stage2-run"));
    return s2;
}

SeedRunResult run_seed(const RunConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    const Dataset full = dataset_for_seed(cfg, seed);
    const SplitResult parts = prepare_data(cfg, full, seed).parts;
    const ModelConfig arch = arch_for(cfg, full);
    const Stage1Config s1 = stage1_for_run(cfg, seed);
    IccConfig s2 = stage2_for_run(cfg, seed);

    SeedRunResult res;
    res.seed = seed;

    const bool ce_style_stage1 = !cfg.baseline.empty() || cfg.has_ablation("no_rrl");
    Stage1Result r1 =
        ce_style_stage1
            ? train_ce_only(parts.train, parts.val, arch, s1, cfg.baseline == "rs")
            : train_stage1(parts.train, parts.val, arch, s1);
    res.stage1_trace = std::move(r1.trace);

    ModelState final_state = std::move(r1.state);
    if (!ce_style_stage1) {
        // The relation-aware stage produces two encoders; the EMA teacher is
        // the smoothed one and is what the second stage starts from.
        final_state.encoder = final_state.teacher_encoder;
        final_state.classifier = final_state.teacher_classifier;
    }
    if (cfg.baseline == "decoupling") {
        decoupling_stage2(parts.train, final_state, s2);
    } else if (cfg.baseline.empty() && !cfg.has_ablation("no_icc")) {
        if (cfg.has_ablation("no_vfc")) s2.use_virtual = false;
        if (cfg.has_ablation("no_fdc")) s2.lambda_e = 0.0;
        IccResult r2 = run_icc(parts.train, parts.val, final_state, s2);
        final_state = std::move(r2.state);
        res.icc_trace = std::move(r2.trace);
    }

    const GroupSpec groups =
        cfg.groups_file.empty()
            ? GroupSpec::from_train_counts(parts.train.class_counts)
            : GroupSpec::from_file(cfg.groups_file, full.num_classes());
    res.report = evaluate_model(final_state, parts.test, groups, seed, config_hash(cfg));
    res.final_state = std::move(final_state);
    return res;
}

SeedRunResult run_baseline_decoupling(const RunConfig& cfg, std::uint64_t seed) {
    RunConfig c = cfg;
    c.ablations.clear();
    c.baseline = "decoupling";
    return run_seed(c, seed);
}

namespace {

int thread_budget() {
    const char* env = std::getenv("LMD_THREADS");
    if (!env || !*env) return 1;
    try {
        const int v = std::stoi(env);
        if (v < 1) return 1;
        return std::min(v, 64);
    } catch (const std::exception&) {
        warn("LMD_THREADS is not an integer; running single-threaded");
        return 1;
    }
}

void write_failure_manifest(const std::string& out_dir, const std::string& cfg_hash,
                            const std::string& error) {
    if (out_dir.empty()) return;
    nlohmann::json m;
    m["status"] = "failed";
    m["config_hash"] = cfg_hash;
    m["error"] = error;
    try {
        write_file_atomic(out_dir + "/manifest.json", m.dump(2) + "\n");
    } catch (const std::exception&) {
        // The original failure matters more than the manifest write.
    }
}

} // namespace

std::string stage1_trace_to_json(const Stage1Trace& trace) {
    nlohmann::json j;
    j["epochs"] = trace.l_total.size();
    j["l_ce"] = trace.l_ce;
    j["l_prob"] = trace.l_prob;
    j["l_sample"] = trace.l_sample;
    j["l_channel"] = trace.l_channel;
    j["l_total"] = trace.l_total;
    j["val_bacc"] = trace.val_bacc;
    return j.dump(2) + "\n";
}

std::string icc_trace_to_json(const IccTrace& trace) {
    nlohmann::json entries = nlohmann::json::array();
    for (std::size_t i = 0; i < trace.entries.size(); ++i) {
        const auto& e = trace.entries[i];
        nlohmann::json je;
        je["iteration"] = e.iteration;
        je["m_loss"] = e.m_loss;
        je["e_loss"] = e.e_loss;
        je["val_bacc"] = e.val_bacc;
        je["cum_seconds"] =
            i < trace.wall_clock_seconds.size() ? trace.wall_clock_seconds[i] : 0.0;
        entries.push_back(std::move(je));
    }
    nlohmann::json j;
    j["iterations"] = trace.entries.size();
    j["entries"] = std::move(entries);
    return j.dump(2) + "\n";
}

PipelineResult run_pipeline(const RunConfig& cfg) {
    cfg.validate();
    const std::string hash = config_hash(cfg);
    if (!cfg.out_dir.empty())
        std::filesystem::create_directories(cfg.out_dir);

    PipelineResult result;
    result.runs.resize(cfg.seeds.size());
    std::vector<std::exception_ptr> failures(cfg.seeds.size());

    const int threads = std::min<int>(thread_budget(), static_cast<int>(cfg.seeds.size()));
    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        while (true) {
            const std::size_t i = next.fetch_add(1);
            if (i >= cfg.seeds.size()) return;
            try {
                result.runs[i] = run_seed(cfg, cfg.seeds[i]);
            } catch (...) {
                failures[i] = std::current_exception();
            }
        }
    };
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(threads));
        for (int t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    for (std::size_t i = 0; i < failures.size(); ++i)
        if (failures[i]) {
            std::string msg = "seed " + std::to_string(cfg.seeds[i]) + " failed";
            try {
                std::rethrow_exception(failures[i]);
            } catch (const std::exception& e) {
                msg += std::string(": ") + e.what();
            } catch (...) {
            }
            write_failure_manifest(cfg.out_dir, hash, msg);
            std::rethrow_exception(failures[i]);
        }

    std::vector<MetricsReport> reports;
    reports.reserve(result.runs.size());
    for (const auto& run : result.runs) reports.push_back(run.report);
    result.aggregate = aggregate_reports(reports);

    if (!cfg.out_dir.empty()) {
        nlohmann::json manifest;
        manifest["status"] = "ok";
        manifest["config_hash"] = hash;
        manifest["shared_config_hash"] = shared_config_hash(cfg);
        nlohmann::json seed_entries = nlohmann::json::array();
        for (const auto& run : result.runs) {
            const std::string dir = cfg.out_dir + "/seed" + std::to_string(run.seed);
            std::filesystem::create_directories(dir);
            write_file_atomic(dir + "/report.json", report_to_json(run.report));
            write_file_atomic(dir + "/stage1_trace.json",
                              stage1_trace_to_json(run.stage1_trace));
            if (!run.icc_trace.entries.empty())
                write_file_atomic(dir + "/stage2_trace.json",
                                  icc_trace_to_json(run.icc_trace));
            save_checkpoint(run.final_state, dir + "/checkpoint.lmdc",
                            {"final", run.seed, hash});
            seed_entries.push_back({{"seed", run.seed},
                                    {"report", "seed" + std::to_string(run.seed) + "/report.json"}});
        }
        manifest["seeds"] = std::move(seed_entries);
        write_file_atomic(cfg.out_dir + "/run_config.txt", serialize_config(cfg));
        write_file_atomic(cfg.out_dir + "/aggregate.json",
                          aggregate_to_json(result.aggregate));
        write_file_atomic(cfg.out_dir + "/manifest.json", manifest.dump(2) + "\n");
    }
    return result;
}

// ============================================================
// Ablation matrix
// ============================================================

namespace {

RunConfig row_config(const RunConfig& base, const std::string& row) {
    RunConfig c = base;
    c.ablations.clear();
    c.baseline.clear();
    if (row == "full") {
    } else if (std::find(kAblationNames.begin(), kAblationNames.end(), row) !=
               kAblationNames.end()) {
        c.ablations.push_back(row);
    } else if (std::find(kBaselineNames.begin(), kBaselineNames.end(), row) !=
               kBaselineNames.end()) {
        c.baseline = row;
    } else {
        throw ValidationError("ablation: unknown row '" + row + "'");
    }
    if (!base.out_dir.empty()) c.out_dir = base.out_dir + "/" + row;
    return c;
}

} // namespace

std::vector<AblationRow> ablation_matrix(const RunConfig& cfg,
                                         const std::vector<std::string>& rows) {
    const std::vector<std::string> selected =
        rows.empty() ? std::vector<std::string>{"full", "no_rrl", "no_icc", "no_vfc",
                                                "no_fdc", "ce", "rs", "decoupling"}
                     : rows;
    // Exclusivity invariant: with the ablation switch masked, every row
    // must hash identically to the base config.
    const std::string expected_shared = shared_config_hash(row_config(cfg, selected[0]));

    std::vector<AblationRow> table;
    for (const auto& name : selected) {
        const RunConfig rc = row_config(cfg, name);
        AblationRow row;
        row.name = name;
        row.full_hash = config_hash(rc);
        row.shared_hash = shared_config_hash(rc);
        if (row.shared_hash != expected_shared)
            throw StateError("ablation rows disagree outside the ablation switch");
        row.aggregate = run_pipeline(rc).aggregate;
        table.push_back(std::move(row));
    }
    if (!cfg.out_dir.empty()) {
        std::filesystem::create_directories(cfg.out_dir);
        write_file_atomic(cfg.out_dir + "/ablation_table.json", ablation_table_json(table));
        write_file_atomic(cfg.out_dir + "/ablation_table.txt", ablation_table_text(table));
    }
    return table;
}

std::string ablation_table_json(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    os << "{\n  \"rows\": [\n";
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& r = rows[i];
        os << "    {\"name\": \"" << r.name << "\", \"config_hash\": \"" << r.full_hash
           << "\", \"shared_config_hash\": \"" << r.shared_hash << "\",\n";
        os << "     \"bacc\": {\"mean\": " << f6(r.aggregate.bacc.mean) << ", \"std\": "
           << f6(r.aggregate.bacc.std_dev) << "},";
        os << " \"auc\": {\"mean\": " << f6(r.aggregate.auc.mean) << ", \"std\": "
           << f6(r.aggregate.auc.std_dev) << "},";
        os << " \"f1\": {\"mean\": " << f6(r.aggregate.f1.mean) << ", \"std\": "
           << f6(r.aggregate.f1.std_dev) << "},";
        os << " \"kappa\": {\"mean\": " << f6(r.aggregate.kappa.mean) << ", \"std\": "
           << f6(r.aggregate.kappa.std_dev) << "},\n";
        os << "     \"precision\": {\"mean\": " << f6(r.aggregate.precision.mean)
           << ", \"std\": " << f6(r.aggregate.precision.std_dev) << "},";
        os << " \"recall\": {\"mean\": " << f6(r.aggregate.recall.mean) << ", \"std\": "
           << f6(r.aggregate.recall.std_dev) << "},\n";
        os << "     \"head_bacc\": {\"mean\": " << f6(r.aggregate.head.mean)
           << ", \"std\": " << f6(r.aggregate.head.std_dev) << "},";
        os << " \"medium_bacc\": {\"mean\": " << f6(r.aggregate.medium.mean)
           << ", \"std\": " << f6(r.aggregate.medium.std_dev) << "},";
        os << " \"tail_bacc\": {\"mean\": " << f6(r.aggregate.tail.mean) << ", \"std\": "
           << f6(r.aggregate.tail.std_dev) << "}}" << (i + 1 < rows.size() ? "," : "")
           << "\n";
    }
    os << "  ]\n}\n";
    return os.str();
}

std::string ablation_table_text(const std::vector<AblationRow>& rows) {
    std::ostringstream os;
    char line[256];
    std::snprintf(line, sizeof(line), "%-12s %-15s %-15s %-15s %-15s %-15s %-15s %-15s\n",
                  "run", "bacc", "auc", "f1", "kappa", "head", "medium", "tail");
    os << line;
    os << std::string(12 + 7 * 16, '-') << "\n";
    for (const auto& r : rows) {
        auto cell = [](const AggregateStat& s) {
            char buf[32];
            std::snprintf(buf, sizeof(buf), "%.4f+-%.4f", s.mean, s.std_dev);
            return std::string(buf);
        };
        std::snprintf(line, sizeof(line), "%-12s %-15s %-15s %-15s %-15s %-15s %-15s %-15s\n",
                      r.name.c_str(), cell(r.aggregate.bacc).c_str(),
                      cell(r.aggregate.auc).c_str(), cell(r.aggregate.f1).c_str(),
                      cell(r.aggregate.kappa).c_str(), cell(r.aggregate.head).c_str(),
                      cell(r.aggregate.medium).c_str(), cell(r.aggregate.tail).c_str());
        os << line;
    }
    return os.str();
}

} // namespace lmd
