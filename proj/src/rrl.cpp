#include "lmd/rrl.hpp"

#include <cmath>
#include <sstream>

#include "lmd/metrics.hpp"

namespace lmd {

void Stage1Config::validate() const {
    if (lambda1 < 0.0) throw ValidationError("stage1: lambda1 must be >= 0");
    if (epochs < 1) throw ValidationError("stage1: epochs must be >= 1");
    if (batch_size < 1) throw ValidationError("stage1: batch_size must be >= 1");
    if (!(lr > 0.0)) throw ValidationError("stage1: lr must be > 0");
    if (!(ema_momentum > 0.0 && ema_momentum < 1.0))
        throw ValidationError("stage1: ema_momentum must be in (0, 1)");
    validate_perturb_pair(perturb_strong, perturb_weak);
}

Graph::Node loss_prob(Graph& g, Graph::Node student_logits, Graph::Node teacher_logits,
                      bool kl_student_first) {
    if (!g.value(student_logits).same_shape(g.value(teacher_logits)))
        throw ValidationError("loss_prob: logit shapes differ");
    Graph::Node p = g.softmax_rows(student_logits);
    Graph::Node q = g.softmax_rows(teacher_logits);
    return kl_student_first ? g.kl_rows(p, q) : g.kl_rows(q, p);
}

Graph::Node loss_sample(Graph& g, Graph::Node z_student, Graph::Node z_teacher) {
    if (g.value(z_student).ndim() != 2 ||
        !g.value(z_student).same_shape(g.value(z_teacher)))
        throw ValidationError("loss_sample: feature shapes differ");
    const auto batch = static_cast<double>(g.value(z_student).rows());
    Graph::Node diff = g.sub(g.gram_sample(z_student), g.gram_sample(z_teacher));
    return g.scale(g.sum(g.square(diff)), 1.0 / batch);
}

Graph::Node loss_channel(Graph& g, Graph::Node z_student, Graph::Node z_teacher) {
    if (g.value(z_student).ndim() != 2 ||
        !g.value(z_student).same_shape(g.value(z_teacher)))
        throw ValidationError("loss_channel: feature shapes differ");
    const auto channels = static_cast<double>(g.value(z_student).cols());
    Graph::Node diff = g.sub(g.gram_channel(z_student), g.gram_channel(z_teacher));
    return g.scale(g.sum(g.square(diff)), 1.0 / channels);
}

double loss_prob_value(const Tensor& student_logits, const Tensor& teacher_logits,
                       bool kl_student_first) {
    const Tensor p = softmax_rows(student_logits);
    const Tensor q = softmax_rows(teacher_logits);
    return kl_student_first ? kl_rows_value(p, q) : kl_rows_value(q, p);
}

namespace {

double sq_diff_sum(const Tensor& a, const Tensor& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a.data[i] - b.data[i];
        s += d * d;
    }
    return s;
}

} // namespace

double loss_sample_value(const Tensor& z_student, const Tensor& z_teacher) {
    if (z_student.ndim() != 2 || !z_student.same_shape(z_teacher))
        throw ValidationError("loss_sample: feature shapes differ");
    return sq_diff_sum(gram_sample(z_student), gram_sample(z_teacher)) /
           static_cast<double>(z_student.rows());
}

double loss_channel_value(const Tensor& z_student, const Tensor& z_teacher) {
    if (z_student.ndim() != 2 || !z_student.same_shape(z_teacher))
        throw ValidationError("loss_channel: feature shapes differ");
    return sq_diff_sum(gram_channel(z_student), gram_channel(z_teacher)) /
           static_cast<double>(z_student.cols());
}

Graph::Node loss_stage1(Graph& g, const Tensor& batch_features,
                        const std::vector<int>& labels, ModelState& state,
                        const Stage1Config& cfg, std::uint64_t batch_index,
                        Stage1Breakdown* breakdown) {
    if (batch_features.ndim() != 2 || batch_features.rows() != labels.size())
        throw ValidationError("loss_stage1: batch features and labels disagree");

    const Tensor x_strong = perturb(batch_features, cfg.perturb_strong, batch_index);
    const Tensor x_weak = perturb(batch_features, cfg.perturb_weak, batch_index);

    Graph::Node strong_in = g.constant(x_strong);
    Graph::Node weak_in = g.constant(x_weak);

    // Student: strong view feeds the consistency terms, weak view the CE
    // (as printed); teacher sees the weak view only, without gradient.
    Graph::Node z_student = encoder_forward(g, strong_in, state.encoder, true);
    Graph::Node logits_student = classifier_forward(g, z_student, state.classifier, true);

    Graph::Node logits_ce = logits_student;
    if (!cfg.ce_on_strong_view) {
        Graph::Node z_ce = encoder_forward(g, weak_in, state.encoder, true);
        logits_ce = classifier_forward(g, z_ce, state.classifier, true);
    }

    Graph::Node z_teacher = encoder_forward(g, weak_in, state.teacher_encoder, false);
    Graph::Node logits_teacher =
        classifier_forward(g, z_teacher, state.teacher_classifier, false);

    Graph::Node ce = g.cross_entropy(logits_ce, labels);
    Graph::Node prob = loss_prob(g, logits_student, logits_teacher, cfg.kl_student_first);
    Graph::Node sample = loss_sample(g, z_student, z_teacher);
    Graph::Node channel = loss_channel(g, z_student, z_teacher);

    Graph::Node consistency = g.add(g.add(sample, channel), g.scale(prob, 0.5));
    Graph::Node total = g.add(ce, g.scale(consistency, cfg.lambda1));

    if (breakdown) {
        breakdown->ce = g.value(ce).item();
        breakdown->prob = g.value(prob).item();
        breakdown->sample = g.value(sample).item();
        breakdown->channel = g.value(channel).item();
        breakdown->total = g.value(total).item();
    }
    return total;
}

EvalOutput predict(const ModelState& state, const Tensor& features) {
    const Tensor z = encoder_forward_value(features, state.encoder);
    const Tensor logits = classifier_forward_value(z, state.classifier);
    EvalOutput out;
    out.scores = softmax_rows(logits);
    out.preds.resize(features.rows());
    const std::size_t k = out.scores.cols();
    for (std::size_t i = 0; i < features.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < k; ++j)
            if (out.scores.at(i, j) > out.scores.at(i, best)) best = j;
        out.preds[i] = static_cast<int>(best);
    }
    return out;
}

double eval_bacc(const ModelState& state, const Dataset& ds) {
    const EvalOutput out = predict(state, ds.features);
    const auto confusion = confusion_matrix(ds.labels, out.preds, ds.num_classes());
    return balanced_accuracy(confusion);
}

namespace {

Tensor gather_batch(const Tensor& features, std::span<const int> rows) {
    const std::size_t c = features.cols();
    Tensor out = Tensor::zeros({rows.size(), c});
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(&features.data[static_cast<std::size_t>(rows[i]) * c], c,
                    &out.data[i * c]);
    return out;
}

std::vector<int> gather_labels(const std::vector<int>& labels, std::span<const int> rows) {
    std::vector<int> out(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
        out[i] = labels[static_cast<std::size_t>(rows[i])];
    return out;
}

void assert_teacher_grad_free(const ModelState& state) {
    for (const auto* set : {&state.teacher_encoder, &state.teacher_classifier})
        for (const auto& it : set->items)
            for (double gv : it.tensor.grad)
                if (gv != 0.0)
                    throw StateError("teacher parameter " + it.name +
                                     " received a gradient");
}

} // namespace

Stage1Result train_stage1(const Dataset& train, const Dataset& val,
                          const ModelConfig& arch, const Stage1Config& cfg) {
    cfg.validate();
    train.validate();

    Stage1Result res;
    res.state = init_model(arch, derive_seed(cfg.seed, seed_tag("stage1-init")));
    res.state.ema_momentum = cfg.ema_momentum;
    Stage1Config step_cfg = cfg;
    step_cfg.perturb_strong.seed = derive_seed(cfg.seed, seed_tag("stage1-strong"));
    step_cfg.perturb_weak.seed = derive_seed(cfg.seed, seed_tag("stage1-weak"));

    InstanceSampler sampler(train.size(), derive_seed(cfg.seed, seed_tag("stage1-sampler")));
    SgdConfig sgd{cfg.lr, std::nullopt};
    if (cfg.max_grad_norm > 0.0) sgd.max_grad_norm = cfg.max_grad_norm;

    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<int> order = sampler.next_epoch();
        Stage1Breakdown epoch_mean;
        std::size_t steps_in_epoch = 0;
        for (std::size_t off = 0; off < order.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const int> rows(order.data() + off, end - off);
            const Tensor bx = gather_batch(train.features, rows);
            const std::vector<int> by = gather_labels(train.labels, rows);

            Graph g;
            Stage1Breakdown b;
            Graph::Node total;
            try {
                total = loss_stage1(g, bx, by, res.state, step_cfg, step, &b);
                g.backward(total);
            } catch (const NumericError& e) {
                std::ostringstream os;
                os << e.what() << " [stage1 epoch " << epoch << " step " << step << "]";
                throw NumericError(os.str());
            }
            sgd_step(res.state, ParamGroup::both, sgd);
            ema_update(res.state);
            assert_teacher_grad_free(res.state);

            epoch_mean.ce += b.ce;
            epoch_mean.prob += b.prob;
            epoch_mean.sample += b.sample;
            epoch_mean.channel += b.channel;
            epoch_mean.total += b.total;
            ++steps_in_epoch;
            ++step;
        }
        const auto denom = static_cast<double>(steps_in_epoch);
        res.trace.l_ce.push_back(epoch_mean.ce / denom);
        res.trace.l_prob.push_back(epoch_mean.prob / denom);
        res.trace.l_sample.push_back(epoch_mean.sample / denom);
        res.trace.l_channel.push_back(epoch_mean.channel / denom);
        res.trace.l_total.push_back(epoch_mean.total / denom);
        res.trace.val_bacc.push_back(val.size() > 0 ? eval_bacc(res.state, val) : 0.0);
    }
    return res;
}

Stage1Result train_ce_only(const Dataset& train, const Dataset& val,
                           const ModelConfig& arch, const Stage1Config& cfg,
                           bool class_balanced_sampling) {
    if (cfg.epochs < 1) throw ValidationError("stage1: epochs must be >= 1");
    if (!(cfg.lr > 0.0)) throw ValidationError("stage1: lr must be > 0");
    train.validate();

    Stage1Result res;
    res.state = init_model(arch, derive_seed(cfg.seed, seed_tag("stage1-init")));
    res.state.ema_momentum = cfg.ema_momentum;

    const std::uint64_t sampler_seed = derive_seed(cfg.seed, seed_tag("stage1-sampler"));
    std::optional<InstanceSampler> instance;
    std::optional<ClassBalancedSampler> balanced;
    if (class_balanced_sampling)
        balanced.emplace(train, sampler_seed);
    else
        instance.emplace(train.size(), sampler_seed);
    SgdConfig sgd{cfg.lr, std::nullopt};
    if (cfg.max_grad_norm > 0.0) sgd.max_grad_norm = cfg.max_grad_norm;

    std::uint64_t step = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        const std::vector<int> order = class_balanced_sampling
                                           ? balanced->next_batch(train.size())
                                           : instance->next_epoch();
        double epoch_loss = 0.0;
        std::size_t steps_in_epoch = 0;
        for (std::size_t off = 0; off < order.size();
             off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end =
                std::min(order.size(), off + static_cast<std::size_t>(cfg.batch_size));
            const std::span<const int> rows(order.data() + off, end - off);
            const Tensor bx = gather_batch(train.features, rows);
            const std::vector<int> by = gather_labels(train.labels, rows);

            Graph g;
            Graph::Node x = g.constant(bx);
            Graph::Node z = encoder_forward(g, x, res.state.encoder, true);
            Graph::Node logits = classifier_forward(g, z, res.state.classifier, true);
            Graph::Node ce = g.cross_entropy(logits, by);
            try {
                g.backward(ce);
            } catch (const NumericError& e) {
                std::ostringstream os;
                os << e.what() << " [ce-only epoch " << epoch << " step " << step << "]";
                throw NumericError(os.str());
            }
            sgd_step(res.state, ParamGroup::both, sgd);
            epoch_loss += g.value(ce).item();
            ++steps_in_epoch;
            ++step;
        }
        const auto denom = static_cast<double>(steps_in_epoch);
        res.trace.l_ce.push_back(epoch_loss / denom);
        res.trace.l_prob.push_back(0.0);
        res.trace.l_sample.push_back(0.0);
        res.trace.l_channel.push_back(0.0);
        res.trace.l_total.push_back(epoch_loss / denom);
        res.trace.val_bacc.push_back(val.size() > 0 ? eval_bacc(res.state, val) : 0.0);
    }
    return res;
}

} // namespace lmd
