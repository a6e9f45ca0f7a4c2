#include "tlm/model.hpp"

#include "tlm/lora.hpp"
#include "tlm/metrics.hpp"
#include "optim.hpp"

#include <charconv>
#include <cmath>

namespace tlm {

namespace {

constexpr double kNormEps = 1e-6;
constexpr double kInitScale = 0.02;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

std::string join(const std::vector<std::string>& v) {
    std::string out;
    for (const auto& s : v) {
        if (!out.empty()) out += ", ";
        out += s;
    }
    return out;
}

} // namespace

void ModelConfig::validate() const {
    if (vocab_size < 1 || d_model < 1 || n_layers < 1 || n_heads < 1 || d_ff < 1) {
        throw Error(ErrorKind::validation, "model config: all dimensions must be >= 1");
    }
    if (d_model % n_heads != 0) {
        throw Error(ErrorKind::validation, "model config: d_model must be divisible by n_heads");
    }
    if (max_seq < 2) {
        throw Error(ErrorKind::validation, "model config: max_seq must be >= 2");
    }
}

std::vector<std::string> tensor_names(const ModelConfig& cfg) {
    std::vector<std::string> names = {"token_embd", "pos_embd"};
    for (int32_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "blk." + std::to_string(l) + ".";
        for (const char* part : {"attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_down",
                                 "norm_attn", "norm_ffn"}) {
            names.push_back(p + part);
        }
    }
    names.push_back("output_norm");
    names.push_back("output");
    return names;
}

std::vector<std::string> adapter_target_names(const ModelConfig& cfg) {
    std::vector<std::string> names;
    for (int32_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "blk." + std::to_string(l) + ".";
        for (const char* part : {"attn_q", "attn_k", "attn_v", "attn_o", "ffn_up", "ffn_down"}) {
            names.push_back(p + part);
        }
    }
    names.push_back("output");
    return names;
}

std::pair<Eigen::Index, Eigen::Index> adapter_target_dims(const ModelConfig& cfg,
                                                          const std::string& name) {
    if (name == "output") return {cfg.vocab_size, cfg.d_model};
    if (name.rfind("blk.", 0) == 0) {
        const size_t dot = name.find('.', 4);
        int32_t l = -1;
        if (dot != std::string::npos) {
            auto [ptr, ec] = std::from_chars(name.data() + 4, name.data() + dot, l);
            if (ec != std::errc{} || ptr != name.data() + dot) l = -1;
        }
        if (l >= 0 && l < cfg.n_layers) {
            const std::string part = name.substr(dot + 1);
            if (part == "attn_q" || part == "attn_k" || part == "attn_v" || part == "attn_o") {
                return {cfg.d_model, cfg.d_model};
            }
            if (part == "ffn_up") return {cfg.d_ff, cfg.d_model};
            if (part == "ffn_down") return {cfg.d_model, cfg.d_ff};
        }
    }
    throw Error(ErrorKind::validation,
                "adapter target '" + name + "' is not adaptable; valid targets: " +
                    join(adapter_target_names(cfg)));
}

std::vector<TensorView> tensor_table(const TinyModel& model) {
    const auto& cfg = model.config;
    std::vector<TensorView> table;
    auto mat = [&](const std::string& name, const MatF& m) {
        table.push_back({name, m.data(),
                         {static_cast<uint64_t>(m.rows()), static_cast<uint64_t>(m.cols())}});
    };
    auto vec = [&](const std::string& name, const VecF& v) {
        table.push_back({name, v.data(), {static_cast<uint64_t>(v.size())}});
    };
    mat("token_embd", model.tok_embed);
    mat("pos_embd", model.pos_embed);
    for (int32_t l = 0; l < cfg.n_layers; ++l) {
        const std::string p = "blk." + std::to_string(l) + ".";
        const LayerWeights& lw = model.layers[static_cast<size_t>(l)];
        mat(p + "attn_q", lw.attn_q);
        mat(p + "attn_k", lw.attn_k);
        mat(p + "attn_v", lw.attn_v);
        mat(p + "attn_o", lw.attn_o);
        mat(p + "ffn_up", lw.ffn_up);
        mat(p + "ffn_down", lw.ffn_down);
        vec(p + "norm_attn", lw.norm_attn);
        vec(p + "norm_ffn", lw.norm_ffn);
    }
    vec("output_norm", model.final_norm);
    mat("output", model.head);
    return table;
}

ParamRef named_param(TinyModel& model, const std::string& name) {
    auto mat = [](MatF& m) { return ParamRef{m.data(), static_cast<size_t>(m.size())}; };
    auto vec = [](VecF& v) { return ParamRef{v.data(), static_cast<size_t>(v.size())}; };
    if (name == "token_embd") return mat(model.tok_embed);
    if (name == "pos_embd") return mat(model.pos_embed);
    if (name == "output_norm") return vec(model.final_norm);
    if (name == "output") return mat(model.head);
    if (name.rfind("blk.", 0) == 0) {
        const size_t dot = name.find('.', 4);
        if (dot != std::string::npos) {
            int32_t l = -1;
            const char* first = name.data() + 4;
            const char* last = name.data() + dot;
            auto [ptr, ec] = std::from_chars(first, last, l);
            if (ec == std::errc{} && ptr == last && l >= 0 && l < model.config.n_layers) {
                LayerWeights& lw = model.layers[static_cast<size_t>(l)];
                const std::string part = name.substr(dot + 1);
                if (part == "attn_q") return mat(lw.attn_q);
                if (part == "attn_k") return mat(lw.attn_k);
                if (part == "attn_v") return mat(lw.attn_v);
                if (part == "attn_o") return mat(lw.attn_o);
                if (part == "ffn_up") return mat(lw.ffn_up);
                if (part == "ffn_down") return mat(lw.ffn_down);
                if (part == "norm_attn") return vec(lw.norm_attn);
                if (part == "norm_ffn") return vec(lw.norm_ffn);
            }
        }
    }
    throw Error(ErrorKind::validation,
                "unknown tensor '" + name + "'; valid: " + join(tensor_names(model.config)));
}

std::string compute_digest(const TinyModel& model) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& t : tensor_table(model)) {
        h = fnv1a64(t.data, t.elements() * sizeof(float), h);
    }
    return hex_u64(h);
}

TinyModel init_model(const ModelConfig& cfg) {
    cfg.validate();
    TinyModel m;
    m.config = cfg;
    GaussianRng rng(cfg.seed);
    auto fill = [&](MatF& mat, Eigen::Index rows, Eigen::Index cols) {
        mat.resize(rows, cols);
        float* p = mat.data();
        for (Eigen::Index i = 0; i < mat.size(); ++i) {
            p[i] = static_cast<float>(kInitScale * rng.next());
        }
    };
    fill(m.tok_embed, cfg.vocab_size, cfg.d_model);
    fill(m.pos_embed, cfg.max_seq, cfg.d_model);
    m.layers.resize(static_cast<size_t>(cfg.n_layers));
    for (auto& lw : m.layers) {
        fill(lw.attn_q, cfg.d_model, cfg.d_model);
        fill(lw.attn_k, cfg.d_model, cfg.d_model);
        fill(lw.attn_v, cfg.d_model, cfg.d_model);
        fill(lw.attn_o, cfg.d_model, cfg.d_model);
        fill(lw.ffn_up, cfg.d_ff, cfg.d_model);
        fill(lw.ffn_down, cfg.d_model, cfg.d_ff);
        lw.norm_attn = VecF::Ones(cfg.d_model);
        lw.norm_ffn = VecF::Ones(cfg.d_model);
    }
    m.final_norm = VecF::Ones(cfg.d_model);
    fill(m.head, cfg.vocab_size, cfg.d_model);
    m.base_digest = compute_digest(m);
    return m;
}

std::shared_ptr<const LayerWeights> ModelSource::layer(int l) {
    if (l < 0 || l >= model_.config.n_layers) {
        throw Error(ErrorKind::validation, "layer index out of range");
    }
    // non-owning alias; the model outlives the forward pass
    return {std::shared_ptr<void>(), &model_.layers[static_cast<size_t>(l)]};
}

// ---------------------------------------------------------------------------
// forward/backward engine (float64 throughout; weights cast from f32 storage)
// ---------------------------------------------------------------------------

namespace {

struct LoraPairD {
    MatD a; // [r x in]
    MatD b; // [out x r]
};

struct AdapterView {
    double scaling = 0.0;
    std::map<std::string, LoraPairD> targets;
};

AdapterView make_adapter_view(const LoraAdapter& ad, const ModelConfig& cfg) {
    if (ad.rank < 1) throw Error(ErrorKind::validation, "adapter rank must be >= 1");
    if (!(ad.alpha > 0)) throw Error(ErrorKind::validation, "adapter alpha must be > 0");
    AdapterView view;
    view.scaling = ad.scaling();
    for (const auto& e : ad.entries) {
        auto [out, in] = adapter_target_dims(cfg, e.target);
        if (e.a.rows() != ad.rank || e.a.cols() != in || e.b.rows() != out ||
            e.b.cols() != ad.rank) {
            throw Error(ErrorKind::validation,
                        "adapter shapes for target '" + e.target + "' do not conform");
        }
        view.targets.emplace(e.target, LoraPairD{e.a.cast<double>(), e.b.cast<double>()});
    }
    return view;
}

struct LayerTrace {
    MatD x_in, n1;       // [T x d]
    VecD rho1;           // [T]
    MatD q, k, v;        // [T x d], adapter path included
    std::vector<MatD> p; // per head [T x T], causal rows
    MatD o;              // [T x d]
    MatD x_mid, n2;
    VecD rho2;
    MatD u, g; // [T x d_ff], pre/post GELU
    std::map<std::string, MatD> z; // adapter taps: x·A^T per target
};

struct Trace {
    std::vector<LayerTrace> layers;
    MatD x_final, f;
    VecD rho_f;
    std::map<std::string, MatD> z_head;
    MatD logits;
};

// y(t) = W·x(t) (+ scaling·B·(A·x(t))), one GEMV per row so that row t never
// depends on how many rows follow it
void project_rows(const MatD& x, const MatD& w, const LoraPairD* lp, double scaling, MatD& y,
                  MatD* z_tap) {
    y.resize(x.rows(), w.rows());
    if (lp && z_tap) z_tap->resize(x.rows(), lp->a.rows());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        y.row(t).noalias() = (w * x.row(t).transpose()).transpose();
        if (lp) {
            VecD z = lp->a * x.row(t).transpose();
            if (z_tap) z_tap->row(t) = z.transpose();
            y.row(t).noalias() += scaling * (lp->b * z).transpose();
        }
    }
}

void rmsnorm_rows(const MatD& x, const VecD& gain, MatD& out, VecD& rho) {
    const double d = static_cast<double>(x.cols());
    out.resize(x.rows(), x.cols());
    rho.resize(x.rows());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double ms = x.row(t).squaredNorm() / d;
        rho(t) = std::sqrt(ms + kNormEps);
        out.row(t) = x.row(t).cwiseProduct(gain.transpose()) / rho(t);
    }
}

// dy -> dx for y = x ⊙ g / rho(row); accumulates dg as [d x 1] when wanted
void rmsnorm_backward(const MatD& x, const VecD& rho, const VecD& gain, const MatD& dy, MatD& dx,
                      MatD* dg) {
    const double d = static_cast<double>(x.cols());
    dx.resize(x.rows(), x.cols());
    for (Eigen::Index t = 0; t < x.rows(); ++t) {
        const double r = rho(t);
        Eigen::RowVectorXd gdy = dy.row(t).cwiseProduct(gain.transpose());
        const double dot = gdy.cwiseProduct(x.row(t)).sum();
        dx.row(t) = gdy / r - x.row(t) * (dot / (d * r * r * r));
        if (dg) dg->col(0) += (dy.row(t).cwiseProduct(x.row(t)) / r).transpose();
    }
}

inline double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2)); }

inline double gelu_grad(double u) {
    const double cdf = 0.5 * (1.0 + std::erf(u * M_SQRT1_2));
    const double pdf = std::exp(-0.5 * u * u) * kInvSqrt2Pi;
    return cdf + u * pdf;
}

VecD softmax_row(const Eigen::Ref<const Eigen::RowVectorXd>& row) {
    const double mx = row.maxCoeff();
    VecD e = (row.array() - mx).exp().matrix().transpose();
    return e / e.sum();
}

// causal multi-head attention; scores only touch keys at positions <= t
void attention_rows(const MatD& q, const MatD& k, const MatD& v, int heads,
                    std::vector<MatD>& p_out, MatD& o) {
    const Eigen::Index t_len = q.rows();
    const Eigen::Index d = q.cols();
    const Eigen::Index hd = d / heads;
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    o.setZero(t_len, d);
    p_out.assign(static_cast<size_t>(heads), MatD::Zero(t_len, t_len));
    for (int h = 0; h < heads; ++h) {
        auto qh = q.middleCols(h * hd, hd);
        auto kh = k.middleCols(h * hd, hd);
        auto vh = v.middleCols(h * hd, hd);
        MatD& p = p_out[static_cast<size_t>(h)];
        for (Eigen::Index t = 0; t < t_len; ++t) {
            VecD s(t + 1);
            for (Eigen::Index j = 0; j <= t; ++j) {
                s(j) = qh.row(t).dot(kh.row(j)) * inv_sqrt_hd;
            }
            const double mx = s.maxCoeff();
            double denom = 0.0;
            for (Eigen::Index j = 0; j <= t; ++j) {
                s(j) = std::exp(s(j) - mx);
                denom += s(j);
            }
            auto ot = o.row(t).segment(h * hd, hd);
            for (Eigen::Index j = 0; j <= t; ++j) {
                const double pj = s(j) / denom;
                p(t, j) = pj;
                ot.noalias() += pj * vh.row(j);
            }
        }
    }
}

const LoraPairD* adapter_for(const AdapterView* ad, const std::string& name) {
    if (!ad) return nullptr;
    auto it = ad->targets.find(name);
    return it == ad->targets.end() ? nullptr : &it->second;
}

MatD run_forward(WeightSource& src, std::span<const int32_t> tokens, const AdapterView* ad,
                 Trace* tr) {
    const ModelConfig& cfg = src.config();
    cfg.validate();
    const auto t_len = static_cast<Eigen::Index>(tokens.size());
    if (t_len == 0) {
        throw Error(ErrorKind::validation, "forward: empty token sequence");
    }
    if (t_len > cfg.max_seq) {
        throw Error(ErrorKind::validation,
                    "sequence too long: " + std::to_string(tokens.size()) + " > max_seq " +
                        std::to_string(cfg.max_seq));
    }
    for (int32_t id : tokens) {
        if (id < 0 || id >= cfg.vocab_size) {
            throw Error(ErrorKind::validation, "invalid token id " + std::to_string(id));
        }
    }

    const int d = cfg.d_model;
    MatD x(t_len, d);
    {
        const MatF& tok = src.tok_embed();
        const MatF& pos = src.pos_embed();
        for (Eigen::Index t = 0; t < t_len; ++t) {
            x.row(t) = tok.row(tokens[static_cast<size_t>(t)]).cast<double>() +
                       pos.row(t).cast<double>();
        }
    }

    if (tr) tr->layers.resize(static_cast<size_t>(cfg.n_layers));

    for (int32_t l = 0; l < cfg.n_layers; ++l) {
        const std::string prefix = "blk." + std::to_string(l) + ".";
        const auto lw = src.layer(l);
        const MatD wq = lw->attn_q.cast<double>();
        const MatD wk = lw->attn_k.cast<double>();
        const MatD wv = lw->attn_v.cast<double>();
        const MatD wo = lw->attn_o.cast<double>();
        const MatD wup = lw->ffn_up.cast<double>();
        const MatD wdown = lw->ffn_down.cast<double>();
        const VecD g1 = lw->norm_attn.cast<double>();
        const VecD g2 = lw->norm_ffn.cast<double>();

        LayerTrace* lt = tr ? &tr->layers[static_cast<size_t>(l)] : nullptr;

        MatD n1;
        VecD rho1;
        rmsnorm_rows(x, g1, n1, rho1);

        MatD q, k, v;
        auto tap = [&](const char* part) -> MatD* {
            return lt ? &lt->z[prefix + part] : nullptr;
        };
        project_rows(n1, wq, adapter_for(ad, prefix + "attn_q"), ad ? ad->scaling : 0.0, q,
                     tap("attn_q"));
        project_rows(n1, wk, adapter_for(ad, prefix + "attn_k"), ad ? ad->scaling : 0.0, k,
                     tap("attn_k"));
        project_rows(n1, wv, adapter_for(ad, prefix + "attn_v"), ad ? ad->scaling : 0.0, v,
                     tap("attn_v"));

        std::vector<MatD> p;
        MatD o;
        attention_rows(q, k, v, cfg.n_heads, p, o);

        MatD attn_out;
        project_rows(o, wo, adapter_for(ad, prefix + "attn_o"), ad ? ad->scaling : 0.0, attn_out,
                     tap("attn_o"));

        MatD x_mid = x + attn_out;

        MatD n2;
        VecD rho2;
        rmsnorm_rows(x_mid, g2, n2, rho2);

        MatD u;
        project_rows(n2, wup, adapter_for(ad, prefix + "ffn_up"), ad ? ad->scaling : 0.0, u,
                     tap("ffn_up"));

        MatD gact = u.unaryExpr([](double e) { return gelu(e); });

        MatD dn;
        project_rows(gact, wdown, adapter_for(ad, prefix + "ffn_down"), ad ? ad->scaling : 0.0, dn,
                     tap("ffn_down"));

        MatD x_out = x_mid + dn;

        if (lt) {
            lt->x_in = std::move(x);
            lt->n1 = std::move(n1);
            lt->rho1 = std::move(rho1);
            lt->q = std::move(q);
            lt->k = std::move(k);
            lt->v = std::move(v);
            lt->p = std::move(p);
            lt->o = std::move(o);
            lt->x_mid = x_mid;
            lt->n2 = std::move(n2);
            lt->rho2 = std::move(rho2);
            lt->u = std::move(u);
            lt->g = std::move(gact);
            x = std::move(x_out);
        } else {
            x = std::move(x_out);
        }
    }

    MatD f;
    VecD rho_f;
    const VecD gf = src.final_norm().cast<double>();
    rmsnorm_rows(x, gf, f, rho_f);

    const MatD whead = src.head().cast<double>();
    MatD logits;
    project_rows(f, whead, adapter_for(ad, "output"), ad ? ad->scaling : 0.0, logits,
                 tr ? &tr->z_head["output"] : nullptr);

    if (tr) {
        tr->x_final = std::move(x);
        tr->f = std::move(f);
        tr->rho_f = std::move(rho_f);
        tr->logits = logits;
    }
    return logits;
}

} // namespace

MatF forward(WeightSource& src, std::span<const int32_t> tokens, const LoraAdapter* adapter) {
    if (adapter) {
        AdapterView view = make_adapter_view(*adapter, src.config());
        return run_forward(src, tokens, &view, nullptr).cast<float>();
    }
    return run_forward(src, tokens, nullptr, nullptr).cast<float>();
}

MatF forward(const TinyModel& model, std::span<const int32_t> tokens, const LoraAdapter* adapter) {
    ModelSource src(model);
    return forward(src, tokens, adapter);
}

NllResult neural_nll(WeightSource& src, const TokenSequence& seq, const LoraAdapter* adapter) {
    if (!seq.has_boundaries) {
        throw Error(ErrorKind::validation, "neural_nll: sequence must carry boundaries");
    }
    validate_sequence(seq, src.config().vocab_size);

    MatD logits;
    if (adapter) {
        AdapterView view = make_adapter_view(*adapter, src.config());
        logits = run_forward(src, seq.ids, &view, nullptr);
    } else {
        logits = run_forward(src, seq.ids, nullptr, nullptr);
    }

    NllResult r;
    const auto t_len = logits.rows();
    r.events = static_cast<uint64_t>(t_len - 1);
    double total = 0.0;
    for (Eigen::Index t = 0; t + 1 < t_len; ++t) {
        const VecD p = softmax_row(logits.row(t));
        const double bits = -std::log2(p(seq.ids[static_cast<size_t>(t) + 1]));
        r.bits.push_back(bits);
        total += bits;
    }
    r.mean_bits = total / static_cast<double>(r.events);
    r.perplexity = perplexity_from_xent(r.mean_bits);
    return r;
}

NllResult neural_nll(const TinyModel& model, const TokenSequence& seq, const LoraAdapter* adapter) {
    ModelSource src(model);
    return neural_nll(src, seq, adapter);
}

double Gradients::loss_bits() const { return loss_nats / M_LN2; }

Gradients backward(const TinyModel& model, const TokenSequence& seq,
                   const std::set<std::string>& trainable, const LoraAdapter* adapter) {
    const ModelConfig& cfg = model.config;
    if (!seq.has_boundaries) {
        throw Error(ErrorKind::validation, "backward: sequence must carry boundaries");
    }
    validate_sequence(seq, cfg.vocab_size);

    // validate the mask against base + adapter parameter names
    {
        std::set<std::string> valid;
        for (auto& n : tensor_names(cfg)) valid.insert(n);
        if (adapter) {
            for (auto& n : adapter_param_names(*adapter)) valid.insert(n);
        }
        for (const auto& n : trainable) {
            if (!valid.count(n)) {
                throw Error(ErrorKind::validation, "backward: unknown trainable tensor '" + n + "'");
            }
        }
    }

    AdapterView view;
    const AdapterView* ad = nullptr;
    if (adapter) {
        view = make_adapter_view(*adapter, cfg);
        ad = &view;
    }

    ModelSource src(model);
    Trace tr;
    run_forward(src, seq.ids, ad, &tr);

    const auto t_len = tr.logits.rows();
    const auto k_events = t_len - 1;
    const double inv_k = 1.0 / static_cast<double>(k_events);

    Gradients g;
    auto slot = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) -> MatD* {
        if (!trainable.count(name)) return nullptr;
        return &g.tensors.try_emplace(name, MatD::Zero(rows, cols)).first->second;
    };

    // loss and dlogits
    MatD dlogits = MatD::Zero(t_len, cfg.vocab_size);
    for (Eigen::Index t = 0; t < k_events; ++t) {
        const VecD p = softmax_row(tr.logits.row(t));
        const int32_t y = seq.ids[static_cast<size_t>(t) + 1];
        g.loss_nats -= std::log(p(y));
        dlogits.row(t) = p.transpose() * inv_k;
        dlogits(t, y) -= inv_k;
    }
    g.loss_nats *= inv_k;

    const double scaling = ad ? ad->scaling : 0.0;

    // projection backward: y = x W^T (+ s (x A^T) B^T)
    auto backprop_proj = [&](const std::string& name, const MatD& x, const MatD& w_d,
                             const MatD& dy, const MatD* z) -> MatD {
        if (auto* s = slot(name, w_d.rows(), w_d.cols())) s->noalias() += dy.transpose() * x;
        MatD dx = dy * w_d;
        if (const LoraPairD* lp = adapter_for(ad, name)) {
            if (auto* s = slot(name + ".lora_b", lp->b.rows(), lp->b.cols())) {
                s->noalias() += scaling * (dy.transpose() * (*z));
            }
            MatD dz = scaling * (dy * lp->b);
            if (auto* s = slot(name + ".lora_a", lp->a.rows(), lp->a.cols())) {
                s->noalias() += dz.transpose() * x;
            }
            dx.noalias() += dz * lp->a;
        }
        return dx;
    };

    // head + final norm
    const MatD whead = model.head.cast<double>();
    const VecD gf = model.final_norm.cast<double>();
    const MatD* z_head = tr.z_head.count("output") ? &tr.z_head.at("output") : nullptr;
    MatD df = backprop_proj("output", tr.f, whead, dlogits, z_head);
    MatD dx;
    rmsnorm_backward(tr.x_final, tr.rho_f, gf, df, dx,
                     slot("output_norm", cfg.d_model, 1));

    const Eigen::Index hd = cfg.head_dim();
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

    for (int32_t l = cfg.n_layers - 1; l >= 0; --l) {
        const std::string prefix = "blk." + std::to_string(l) + ".";
        const LayerTrace& lt = tr.layers[static_cast<size_t>(l)];
        const LayerWeights& lw = model.layers[static_cast<size_t>(l)];
        const MatD wq = lw.attn_q.cast<double>();
        const MatD wk = lw.attn_k.cast<double>();
        const MatD wv = lw.attn_v.cast<double>();
        const MatD wo = lw.attn_o.cast<double>();
        const MatD wup = lw.ffn_up.cast<double>();
        const MatD wdown = lw.ffn_down.cast<double>();
        const VecD g1 = lw.norm_attn.cast<double>();
        const VecD g2 = lw.norm_ffn.cast<double>();

        // x_out = x_mid + dn
        MatD d_xmid = dx;

        // dn = proj(gact, wdown)
        auto zd = lt.z.count(prefix + "ffn_down") ? &lt.z.at(prefix + "ffn_down") : nullptr;
        MatD d_gact = backprop_proj(prefix + "ffn_down", lt.g, wdown, dx, zd);

        // gelu
        MatD du = d_gact.cwiseProduct(lt.u.unaryExpr([](double e) { return gelu_grad(e); }));

        // u = proj(n2, wup)
        auto zu = lt.z.count(prefix + "ffn_up") ? &lt.z.at(prefix + "ffn_up") : nullptr;
        MatD dn2 = backprop_proj(prefix + "ffn_up", lt.n2, wup, du, zu);

        MatD dx_tmp;
        rmsnorm_backward(lt.x_mid, lt.rho2, g2, dn2, dx_tmp,
                         slot(prefix + "norm_ffn", cfg.d_model, 1));
        d_xmid += dx_tmp;

        // x_mid = x_in + attn_out
        MatD d_xin = d_xmid;

        // attn_out = proj(o, wo)
        auto zo = lt.z.count(prefix + "attn_o") ? &lt.z.at(prefix + "attn_o") : nullptr;
        MatD d_o = backprop_proj(prefix + "attn_o", lt.o, wo, d_xmid, zo);

        // attention backward
        MatD d_q = MatD::Zero(t_len, cfg.d_model);
        MatD d_k = MatD::Zero(t_len, cfg.d_model);
        MatD d_v = MatD::Zero(t_len, cfg.d_model);
        for (int h = 0; h < cfg.n_heads; ++h) {
            const MatD& p = lt.p[static_cast<size_t>(h)];
            auto qh = lt.q.middleCols(h * hd, hd);
            auto kh = lt.k.middleCols(h * hd, hd);
            auto vh = lt.v.middleCols(h * hd, hd);
            auto d_oh = d_o.middleCols(h * hd, hd);

            MatD dp = d_oh * vh.transpose();              // [T x T]
            d_v.middleCols(h * hd, hd).noalias() += p.transpose() * d_oh;

            // softmax rows: ds = p .* (dp - rowdot(dp, p))
            MatD ds(t_len, t_len);
            for (Eigen::Index t = 0; t < t_len; ++t) {
                const double dot = dp.row(t).cwiseProduct(p.row(t)).sum();
                ds.row(t) = p.row(t).cwiseProduct((dp.row(t).array() - dot).matrix());
            }
            d_q.middleCols(h * hd, hd).noalias() += ds * kh * inv_sqrt_hd;
            d_k.middleCols(h * hd, hd).noalias() += ds.transpose() * qh * inv_sqrt_hd;
        }

        auto zq = lt.z.count(prefix + "attn_q") ? &lt.z.at(prefix + "attn_q") : nullptr;
        auto zk = lt.z.count(prefix + "attn_k") ? &lt.z.at(prefix + "attn_k") : nullptr;
        auto zv = lt.z.count(prefix + "attn_v") ? &lt.z.at(prefix + "attn_v") : nullptr;
        MatD dn1 = backprop_proj(prefix + "attn_q", lt.n1, wq, d_q, zq);
        dn1 += backprop_proj(prefix + "attn_k", lt.n1, wk, d_k, zk);
        dn1 += backprop_proj(prefix + "attn_v", lt.n1, wv, d_v, zv);

        rmsnorm_backward(lt.x_in, lt.rho1, g1, dn1, dx_tmp,
                         slot(prefix + "norm_attn", cfg.d_model, 1));
        d_xin += dx_tmp;

        dx = std::move(d_xin);
    }

    // embeddings
    if (auto* s = slot("token_embd", cfg.vocab_size, cfg.d_model)) {
        for (Eigen::Index t = 0; t < t_len; ++t) {
            s->row(seq.ids[static_cast<size_t>(t)]) += dx.row(t);
        }
    }
    if (auto* s = slot("pos_embd", cfg.max_seq, cfg.d_model)) {
        for (Eigen::Index t = 0; t < t_len; ++t) {
            s->row(t) += dx.row(t);
        }
    }
    return g;
}

std::vector<double> train_model(TinyModel& model, const std::vector<TokenSequence>& data,
                                const TrainOptions& opts) {
    if (opts.steps < 1) throw Error(ErrorKind::validation, "train: steps must be >= 1");
    if (opts.batch_size < 1) throw Error(ErrorKind::validation, "train: batch_size must be >= 1");
    if (data.empty()) throw Error(ErrorKind::validation, "train: dataset is empty");

    const auto names = tensor_names(model.config);
    const std::set<std::string> mask(names.begin(), names.end());

    SplitMix64 pick(opts.seed);
    detail::AdamState adam;
    std::vector<double> curve;
    curve.reserve(static_cast<size_t>(opts.steps));

    for (int step = 0; step < opts.steps; ++step) {
        std::map<std::string, MatD> batch_grads;
        double loss = 0.0;
        for (int b = 0; b < opts.batch_size; ++b) {
            const auto& seq = data[pick.below(data.size())];
            Gradients g = backward(model, seq, mask);
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
                        "training diverged (non-finite loss) at step " + std::to_string(step));
        }
        curve.push_back(loss / M_LN2);

        if (opts.optimizer == Optimizer::adam) ++adam.t;
        for (auto& [name, grad] : batch_grads) {
            grad *= inv_b;
            ParamRef p = named_param(model, name);
            if (opts.optimizer == Optimizer::sgd) {
                detail::sgd_step(p, grad, opts.lr);
            } else {
                detail::adam_step(p, name, grad, opts.lr, adam);
            }
        }
    }
    model.base_digest = compute_digest(model);
    return curve;
}

} // namespace tlm
