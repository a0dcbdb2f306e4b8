#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "etta/bilevel.hpp"
#include "etta/episodes.hpp"
#include "etta/grad.hpp"

namespace etta {

enum class SamplerMode { ts, mts };
enum class OptimizerRoles { standard, swapped };

inline std::string to_string(SamplerMode m) { return m == SamplerMode::ts ? "ts" : "mts"; }
inline std::string to_string(MetaObjectiveMode m) {
    return m == MetaObjectiveMode::se ? "se" : "task_only";
}
inline std::string to_string(OptimizerRoles r) {
    return r == OptimizerRoles::standard ? "standard" : "swapped";
}

struct TrainConfig {
    double alpha = 5e-5;     // inner learning rate
    double beta = 5e-5;      // outer learning rate
    double gamma1 = 1.0;     // sample-wise alignment weight
    double gamma2 = 0.5;     // prototype-wise alignment weight
    double clip_norm = 2.0;
    int iterations = 2000;   // desk-scale default; the reference setup ran 10000
    int inner_steps = 1;
    std::size_t batch_per_domain = 120;
    std::size_t n_te = 120;
    MetaObjectiveMode meta_objective_mode = MetaObjectiveMode::se;
    SamplerMode sampler_mode = SamplerMode::mts;
    MixRatioSchedule schedule{};
    bool second_order = true;
    bool class_balanced = true;
    // standard: inner = plain clipped GD(alpha), outer = Adam(beta).
    // swapped : inner = stateless normalized step(beta), outer = clipped GD(alpha).
    OptimizerRoles optimizer_roles = OptimizerRoles::standard;
    double temperature = 0.1;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    BackboneSpec backbone{};
    std::uint64_t seed = 0;

    void validate() const {
        if (!(alpha > 0.0) || !(beta > 0.0)) throw std::invalid_argument("TrainConfig: rates must be > 0");
        if (!(clip_norm > 0.0)) throw std::invalid_argument("TrainConfig: clip_norm must be > 0");
        if (iterations < 1) throw std::invalid_argument("TrainConfig: iterations must be >= 1");
        if (inner_steps < 1) throw std::invalid_argument("TrainConfig: inner_steps must be >= 1");
        if (gamma1 < 0.0 || gamma2 < 0.0) throw std::invalid_argument("TrainConfig: gammas must be >= 0");
        if (!(temperature > 0.0)) throw std::invalid_argument("TrainConfig: temperature must be > 0");
        if (batch_per_domain < 1 || n_te < 1) throw std::invalid_argument("TrainConfig: batch sizes must be >= 1");
        if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0 && adam_beta2 >= 0.0 && adam_beta2 < 1.0))
            throw std::invalid_argument("TrainConfig: adam betas must lie in [0,1)");
        if (!(adam_eps > 0.0)) throw std::invalid_argument("TrainConfig: adam_eps must be > 0");
        schedule.validate();
    }

    InnerRule inner_rule() const {
        return optimizer_roles == OptimizerRoles::standard ? InnerRule::sgd_clip : InnerRule::adam_like;
    }
    double inner_rate() const { return optimizer_roles == OptimizerRoles::standard ? alpha : beta; }
};

struct EpisodeLog {
    int iteration = 0;
    double loss_task_tr = 0.0;                  // L_task(D_tr) at the original params
    std::optional<double> sa;                   // alignment losses (se mode only)
    std::optional<double> pa;
    std::optional<double> meta;
    std::optional<double> loss_task_metatest;   // training-task DG loss (adapted params)
    std::optional<double> loss_task_unseen;     // testing-task DG loss (diagnostics only)
    std::optional<double> r_ho;                 // realized held-out mix ratio
    std::vector<double> ratios;                 // realized ratios over all K source domains
    int held_out_id = -1;
};

// Adapted parameters plus the inner trajectory needed to differentiate
// through the adaptation; tied to their origin by a content hash.
struct AdaptedParams {
    ModelParams params;
    InnerResult inner;
};

namespace detail {

inline EpisodeObjective make_objective(const ModelParams& params, const std::vector<Mat>& train_x,
                                       const std::vector<std::vector<int>>& train_y, const Mat& te_x,
                                       const std::vector<int>& te_y, const TrainConfig& cfg) {
    return EpisodeObjective(params.backbone, params.num_classes, train_x, train_y, te_x, te_y,
                            cfg.temperature, cfg.gamma1, cfg.gamma2, cfg.meta_objective_mode);
}

inline void split_batches(const std::vector<Batch>& batches, std::vector<Mat>& x,
                          std::vector<std::vector<int>>& y) {
    for (const auto& b : batches) {
        x.push_back(b.x);
        y.push_back(b.y);
    }
}

} // namespace detail

// Inner optimization: adapted parameters from one or more clipped
// task-gradient steps on the meta-train batches. The originals are untouched.
inline AdaptedParams inner_step(const ModelParams& params, const std::vector<Batch>& meta_train,
                                const TrainConfig& cfg) {
    cfg.validate();
    std::vector<Mat> tx;
    std::vector<std::vector<int>> ty;
    detail::split_batches(meta_train, tx, ty);
    EpisodeObjective obj = detail::make_objective(params, tx, ty, Mat(0, params.backbone.d_in), {}, cfg);
    InnerResult inner = inner_adapt(obj, params.flatten(), cfg.inner_rate(), cfg.clip_norm, cfg.inner_steps,
                                    cfg.inner_rule(), cfg.adam_eps);
    AdaptedParams out;
    out.params = obj.unflatten(inner.adapted);
    out.inner = std::move(inner);
    return out;
}

struct OuterResult {
    ModelParams params;
    LossBreakdown losses;
    MetaParts parts;
    double te_task_value = 0.0;
};

// Outer optimization: evaluates the meta-objective at the adapted parameters,
// takes the composite gradient towards the originals, applies one
// outer-optimizer update.
inline OuterResult outer_step(const ModelParams& params, const AdaptedParams& adapted, const MetaTask& task,
                              const TrainConfig& cfg, AdamState& opt) {
    cfg.validate();
    Vec w = params.flatten();
    if (hash_vector(w) != adapted.inner.origin_hash)
        throw std::invalid_argument("outer_step: adapted params were not produced from these originals");

    EpisodeObjective obj = EpisodeObjective::from_task(params.backbone, params.num_classes, task,
                                                       cfg.temperature, cfg.gamma1, cfg.gamma2,
                                                       cfg.meta_objective_mode);
    Vec g_meta;
    MetaParts parts = obj.meta_value_grad(adapted.inner.adapted, g_meta);
    detail::check_finite(g_meta, "meta-objective gradient");
    Vec total = meta_gradient(obj, adapted.inner, g_meta, cfg.inner_rate(), cfg.clip_norm, cfg.inner_rule(),
                              cfg.adam_eps, cfg.second_order);
    detail::check_finite(total, "meta-gradient");

    if (cfg.optimizer_roles == OptimizerRoles::standard) {
        AdamConfig ac{cfg.beta, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
        adam_update(opt, w, total, ac);
    } else {
        w -= cfg.alpha * clip_by_norm(total, cfg.clip_norm);
    }

    OuterResult res;
    res.params = obj.unflatten(w);
    res.parts = parts;
    res.losses.task = adapted.inner.task_value_origin();
    res.losses.sa = parts.has_alignment ? parts.sa : 0.0;
    res.losses.pa = parts.has_alignment ? parts.pa : 0.0;
    res.losses.meta = parts.meta;
    res.losses.weighted_total = res.losses.task + parts.meta;
    res.te_task_value = obj.te_task_value(adapted.inner.adapted);
    return res;
}

struct TrainHooks {
    std::function<void(int iteration, const MetaTask&)> on_episode;
    std::function<void(int iteration, const ModelParams&, const EpisodeLog&)> on_iteration;
};

struct TrainResult {
    ModelParams params;
    std::vector<EpisodeLog> logs;
};

namespace detail {

inline void guard_finite_log(const EpisodeLog& log) {
    auto bad = [](const std::optional<double>& v) { return v && !std::isfinite(*v); };
    if (!std::isfinite(log.loss_task_tr) || bad(log.sa) || bad(log.pa) || bad(log.meta) ||
        bad(log.loss_task_metatest) || bad(log.loss_task_unseen))
        throw std::runtime_error("training diverged: non-finite loss at iteration " +
                                 std::to_string(log.iteration));
}

inline BackboneSpec resolve_backbone(BackboneSpec spec, const std::vector<DomainDataset>& domains) {
    spec.d_in = domains.front().dim();
    if (spec.kind == BackboneKind::identity) spec.d_z = spec.d_in;
    spec.validate();
    return spec;
}

} // namespace detail

// Algorithm 1: episodic training with task augmentation. The optional
// diagnostics domain is used exclusively for logging the testing-task loss;
// it never influences sampling, gradients, or parameters.
inline TrainResult train(const std::vector<DomainDataset>& train_domains, const TrainConfig& cfg,
                         const DomainDataset* diagnostics_domain = nullptr, const TrainHooks& hooks = {}) {
    cfg.validate();
    if (train_domains.size() < 2) throw std::invalid_argument("train: need K >= 2 source domains");
    BackboneSpec backbone = detail::resolve_backbone(cfg.backbone, train_domains);
    int num_classes = train_domains.front().num_classes();

    Rng root(cfg.seed);
    Rng init_rng = root.derive(1);
    Rng episode_rng = root.derive(2);

    ModelParams params = init_params(backbone, num_classes, init_rng);
    AdamState opt;
    TrainResult out;
    out.logs.reserve(static_cast<std::size_t>(cfg.iterations));

    for (int it = 1; it <= cfg.iterations; ++it) {
        MetaTask task = cfg.sampler_mode == SamplerMode::ts
                            ? sample_task_ts(train_domains, cfg.batch_per_domain, cfg.n_te, episode_rng,
                                             cfg.class_balanced)
                            : sample_task_mts(train_domains, cfg.schedule, cfg.batch_per_domain, cfg.n_te,
                                              episode_rng, cfg.class_balanced);
        if (hooks.on_episode) hooks.on_episode(it, task);

        AdaptedParams adapted = inner_step(params, task.meta_train, cfg);
        OuterResult res = outer_step(params, adapted, task, cfg, opt);
        params = std::move(res.params);

        EpisodeLog log;
        log.iteration = it;
        log.loss_task_tr = res.losses.task;
        if (res.parts.has_alignment) {
            log.sa = res.parts.sa;
            log.pa = res.parts.pa;
        }
        log.meta = res.parts.meta;
        log.loss_task_metatest = res.te_task_value;
        log.r_ho = task.r_ho();
        log.ratios.assign(task.ratios.data(), task.ratios.data() + task.ratios.size());
        log.held_out_id = task.held_out_id;
        if (diagnostics_domain) {
            log.loss_task_unseen = task_loss_value(adapted.params, diagnostics_domain->features(),
                                                   diagnostics_domain->labels(), cfg.temperature);
        }
        detail::guard_finite_log(log);
        if (hooks.on_iteration) hooks.on_iteration(it, params, log);
        out.logs.push_back(std::move(log));
    }
    out.params = std::move(params);
    return out;
}

// All source domains merged into one dataset (the DeepAll training pool).
inline DomainDataset pool_domains(const std::vector<DomainDataset>& domains) {
    if (domains.empty()) throw std::invalid_argument("pool_domains: no domains");
    std::size_t total = 0;
    for (const auto& d : domains) total += d.size();
    Mat x(static_cast<Eigen::Index>(total), domains.front().dim());
    std::vector<int> y;
    y.reserve(total);
    Eigen::Index at = 0;
    for (const auto& d : domains) {
        x.middleRows(at, d.features().rows()) = d.features();
        at += d.features().rows();
        y.insert(y.end(), d.labels().begin(), d.labels().end());
    }
    return DomainDataset(-1, "pooled", std::move(x), std::move(y), domains.front().num_classes());
}

// DeepAll baseline: conventional supervised training on the pooled source
// domains with the same backbone, optimizer, and iteration budget.
inline TrainResult train_deepall(const std::vector<DomainDataset>& train_domains, const TrainConfig& cfg,
                                 const TrainHooks& hooks = {}) {
    cfg.validate();
    if (train_domains.empty()) throw std::invalid_argument("train_deepall: no domains");
    BackboneSpec backbone = detail::resolve_backbone(cfg.backbone, train_domains);
    int num_classes = train_domains.front().num_classes();
    DomainDataset pooled = pool_domains(train_domains);

    Rng root(cfg.seed);
    Rng init_rng = root.derive(1);
    Rng batch_rng = root.derive(2);

    ModelParams params = init_params(backbone, num_classes, init_rng);
    AdamState opt;
    AdamConfig ac{cfg.beta, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps};
    TrainResult out;
    out.logs.reserve(static_cast<std::size_t>(cfg.iterations));

    for (int it = 1; it <= cfg.iterations; ++it) {
        auto idx = sample_batch_indices(pooled, std::min(cfg.batch_per_domain, pooled.size()),
                                        cfg.class_balanced, batch_rng);
        Mat bx(static_cast<Eigen::Index>(idx.size()), pooled.dim());
        std::vector<int> by(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            bx.row(static_cast<Eigen::Index>(i)) = pooled.features().row(static_cast<Eigen::Index>(idx[i]));
            by[i] = pooled.labels()[idx[i]];
        }
        ModelParams g = ModelParams::zeros(backbone, num_classes);
        double loss = task_loss_grad(params, bx, by, cfg.temperature, &g);
        Vec w = params.flatten();
        Vec gv = g.flatten();
        detail::check_finite(gv, "gradient");
        adam_update(opt, w, gv, ac);
        params = ModelParams::from_flat(backbone, num_classes, w);

        EpisodeLog log;
        log.iteration = it;
        log.loss_task_tr = loss;
        detail::guard_finite_log(log);
        if (hooks.on_iteration) hooks.on_iteration(it, params, log);
        out.logs.push_back(std::move(log));
    }
    out.params = std::move(params);
    return out;
}

} // namespace etta
