#include "tlm/lora.hpp"

#include "tlm/quant.hpp"
#include "optim.hpp"

#include <cmath>

namespace tlm {

const LoraEntry* LoraAdapter::find(const std::string& target) const {
    for (const auto& e : entries) {
        if (e.target == target) return &e;
    }
    return nullptr;
}

std::vector<std::string> default_lora_targets(const ModelConfig& cfg) {
    std::vector<std::string> targets;
    for (int32_t l = 0; l < cfg.n_layers; ++l) {
        targets.push_back("blk." + std::to_string(l) + ".attn_q");
        targets.push_back("blk." + std::to_string(l) + ".attn_v");
    }
    return targets;
}

LoraAdapter init_adapter(const TinyModel& model, const std::vector<std::string>& targets,
                         int32_t rank, float alpha, uint64_t seed) {
    if (rank < 1) throw Error(ErrorKind::validation, "init_adapter: rank must be >= 1");
    if (!(alpha > 0)) throw Error(ErrorKind::validation, "init_adapter: alpha must be > 0");

    const std::vector<std::string>& use =
        targets.empty() ? default_lora_targets(model.config) : targets;

    LoraAdapter ad;
    ad.rank = rank;
    ad.alpha = alpha;
    GaussianRng rng(seed);
    for (const auto& name : use) {
        auto [out, in] = adapter_target_dims(model.config, name); // throws on bad name
        LoraEntry e;
        e.target = name;
        e.a.resize(rank, in);
        float* p = e.a.data();
        for (Eigen::Index i = 0; i < e.a.size(); ++i) {
            p[i] = static_cast<float>(0.02 * rng.next());
        }
        e.b = MatF::Zero(out, rank); // zero-init: the adapted model starts at base behavior
        ad.entries.push_back(std::move(e));
    }
    return ad;
}

VecF lora_apply(const MatF& w, const LoraEntry& entry, double scaling, const VecF& x) {
    if (w.cols() != x.size() || entry.a.cols() != w.cols() || entry.b.rows() != w.rows() ||
        entry.a.rows() != entry.b.cols()) {
        throw Error(ErrorKind::validation, "lora_apply: shapes do not conform");
    }
    const VecD xd = x.cast<double>();
    VecD y = w.cast<double>() * xd;
    y.noalias() += scaling * (entry.b.cast<double>() * (entry.a.cast<double>() * xd));
    return y.cast<float>();
}

VecF lora_apply(const QuantTensor& w, const LoraEntry& entry, double scaling, const VecF& x) {
    return lora_apply(dequantize_matrix(w), entry, scaling, x);
}

TinyModel merge(const TinyModel& model, const LoraAdapter& adapter) {
    TinyModel out = model;
    const double s = adapter.scaling();
    for (const auto& e : adapter.entries) {
        auto [rows, cols] = adapter_target_dims(model.config, e.target);
        if (e.b.rows() != rows || e.a.cols() != cols || e.a.rows() != adapter.rank ||
            e.b.cols() != adapter.rank) {
            throw Error(ErrorKind::validation,
                        "merge: adapter shapes for '" + e.target + "' do not conform");
        }
        ParamRef ref = named_param(out, e.target);
        Eigen::Map<MatF> w(ref.data, rows, cols);
        const MatD merged =
            w.cast<double>() + s * (e.b.cast<double>() * e.a.cast<double>());
        w = merged.cast<float>();
    }
    out.base_digest = compute_digest(out);
    return out;
}

std::vector<std::string> adapter_param_names(const LoraAdapter& adapter) {
    std::vector<std::string> names;
    for (const auto& e : adapter.entries) {
        names.push_back(e.target + ".lora_a");
        names.push_back(e.target + ".lora_b");
    }
    return names;
}

namespace {

MatF& adapter_param_matrix(LoraAdapter& adapter, const std::string& name) {
    for (auto& e : adapter.entries) {
        if (name == e.target + ".lora_a") return e.a;
        if (name == e.target + ".lora_b") return e.b;
    }
    throw Error(ErrorKind::validation, "unknown adapter parameter '" + name + "'");
}

} // namespace

ParamRef named_param(LoraAdapter& adapter, const std::string& name) {
    MatF& m = adapter_param_matrix(adapter, name);
    return {m.data(), static_cast<size_t>(m.size())};
}

std::string adapter_digest(const LoraAdapter& adapter) {
    uint64_t h = 0xcbf29ce484222325ull;
    h = fnv1a64(&adapter.rank, sizeof(adapter.rank), h);
    h = fnv1a64(&adapter.alpha, sizeof(adapter.alpha), h);
    for (const auto& e : adapter.entries) {
        h = fnv1a64(e.target.data(), e.target.size(), h);
        h = fnv1a64(e.a.data(), static_cast<size_t>(e.a.size()) * sizeof(float), h);
        h = fnv1a64(e.b.data(), static_cast<size_t>(e.b.size()) * sizeof(float), h);
    }
    return hex_u64(h);
}

TrainReport train_adapter(const TinyModel& model, const LoraAdapter& adapter,
                          const std::vector<TokenSequence>& data, const TrainOptions& opts) {
    if (opts.steps < 1) throw Error(ErrorKind::validation, "train_adapter: steps must be >= 1");
    if (opts.batch_size < 1) {
        throw Error(ErrorKind::validation, "train_adapter: batch_size must be >= 1");
    }
    if (data.empty()) throw Error(ErrorKind::validation, "train_adapter: dataset is empty");

    TrainReport rep;
    rep.digest_before = compute_digest(model);
    rep.adapter = adapter;

    const auto names = adapter_param_names(rep.adapter);
    const std::set<std::string> mask(names.begin(), names.end());

    SplitMix64 pick(opts.seed);
    detail::AdamState adam;
    rep.loss_bits.reserve(static_cast<size_t>(opts.steps));

    for (int step = 0; step < opts.steps; ++step) {
        std::map<std::string, MatD> batch_grads;
        double loss = 0.0;
        for (int b = 0; b < opts.batch_size; ++b) {
            const auto& seq = data[pick.below(data.size())];
            Gradients g = backward(model, seq, mask, &rep.adapter);
            loss += g.loss_nats;
            for (auto& [name, grad] : g.tensors) {
                auto it = batch_grads.find(name);
                if (it == batch_grads.end()) {
                    batch_grads.emplace(name, std::move(grad));
                } else {
                    it->second += grad;
                }
            }
        }
        const double inv_b = 1.0 / opts.batch_size;
        loss *= inv_b;
        if (!std::isfinite(loss)) {
            throw Error(ErrorKind::numeric,
                        "adapter training diverged (non-finite loss) at step " +
                            std::to_string(step));
        }
        rep.loss_bits.push_back(loss / M_LN2);

        if (opts.optimizer == Optimizer::adam) ++adam.t;
        for (auto& [name, grad] : batch_grads) {
            grad *= inv_b;
            ParamRef p = named_param(rep.adapter, name);
            if (opts.optimizer == Optimizer::sgd) {
                detail::sgd_step(p, grad, opts.lr);
            } else {
                detail::adam_step(p, name, grad, opts.lr, adam);
            }
        }
    }
    rep.digest_after = compute_digest(model);
    return rep;
}

GradCheckResult fd_compare(const TinyModel& model, const LoraAdapter& adapter,
                           const TokenSequence& seq, const Gradients& grads,
                           const std::vector<FdCoord>& coords, double step, double tol) {
    GradCheckResult r;
    for (const auto& c : coords) {
        auto it = grads.tensors.find(c.param);
        if (it == grads.tensors.end()) {
            throw Error(ErrorKind::validation,
                        "fd_compare: gradients lack parameter '" + c.param + "'");
        }
        const double analytic = it->second(c.row, c.col);

        LoraAdapter pert = adapter;
        MatF& m = adapter_param_matrix(pert, c.param);
        if (c.row < 0 || c.row >= m.rows() || c.col < 0 || c.col >= m.cols()) {
            throw Error(ErrorKind::validation, "fd_compare: coordinate out of range");
        }
        const float w0 = m(c.row, c.col);

        m(c.row, c.col) = static_cast<float>(static_cast<double>(w0) + step);
        const double w_plus = static_cast<double>(m(c.row, c.col));
        const double loss_plus = backward(model, seq, {}, &pert).loss_nats;

        m(c.row, c.col) = static_cast<float>(static_cast<double>(w0) - step);
        const double w_minus = static_cast<double>(m(c.row, c.col));
        const double loss_minus = backward(model, seq, {}, &pert).loss_nats;

        const double h_eff = w_plus - w_minus; // the step the f32 storage actually took
        if (h_eff == 0.0) {
            throw Error(ErrorKind::numeric, "fd_compare: zero effective step at " + c.param);
        }
        const double fd = (loss_plus - loss_minus) / h_eff;
        const double rel =
            std::fabs(fd - analytic) / std::max({std::fabs(fd), std::fabs(analytic), 1e-6});
        ++r.checked;
        if (rel >= r.worst_rel_error) {
            r.worst_rel_error = rel;
            r.worst_coord = c.param + "(" + std::to_string(c.row) + "," +
                            std::to_string(c.col) + ")";
        }
    }
    r.pass = r.worst_rel_error < tol;
    return r;
}

GradCheckResult grad_check(const TinyModel& model, const LoraAdapter& adapter,
                           const TokenSequence& seq, int n_coords, double tol, uint64_t seed,
                           const std::string& target_filter) {
    if (n_coords < 1) throw Error(ErrorKind::validation, "grad_check: n_coords must be >= 1");

    struct Param {
        std::string name;
        Eigen::Index rows, cols;
    };
    std::vector<Param> eligible;
    for (const auto& e : adapter.entries) {
        if (!target_filter.empty() && e.target.find(target_filter) == std::string::npos) continue;
        eligible.push_back({e.target + ".lora_a", e.a.rows(), e.a.cols()});
        eligible.push_back({e.target + ".lora_b", e.b.rows(), e.b.cols()});
    }
    if (eligible.empty()) {
        throw Error(ErrorKind::validation,
                    "grad_check: no adapter parameters match filter '" + target_filter + "'");
    }

    const auto names = adapter_param_names(adapter);
    const std::set<std::string> mask(names.begin(), names.end());
    const Gradients grads = backward(model, seq, mask, &adapter);

    SplitMix64 rng(seed);
    std::vector<FdCoord> coords;
    coords.reserve(static_cast<size_t>(n_coords));
    for (int i = 0; i < n_coords; ++i) {
        const Param& p = eligible[rng.below(eligible.size())];
        coords.push_back({p.name, static_cast<int>(rng.below(static_cast<uint64_t>(p.rows))),
                          static_cast<int>(rng.below(static_cast<uint64_t>(p.cols)))});
    }
    return fd_compare(model, adapter, seq, grads, coords, 1e-4, tol);
}

} // namespace tlm
