#include "picogen/performer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "picogen/kernels.hpp"

namespace picogen {

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kInvSqrt2Pi = 0.3989422804014327;

double gelu(double u) { return 0.5 * u * (1.0 + std::erf(u * M_SQRT1_2)); }

double gelu_grad(double u) {
    return 0.5 * (1.0 + std::erf(u * M_SQRT1_2)) + u * std::exp(-0.5 * u * u) * kInvSqrt2Pi;
}

}  // namespace

int ModelConfig::embed_concat() const {
    return std::accumulate(field_embed.begin(), field_embed.end(), 0);
}

void ModelConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0) {
        throw std::invalid_argument("model dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("d_model must be divisible by n_heads");
    }
    if (max_len < 2) throw std::invalid_argument("max_len must be >= 2");
    for (int e : field_embed) {
        if (e <= 0) throw std::invalid_argument("field embedding sizes must be positive");
    }
    if (batch_size <= 0) throw std::invalid_argument("batch_size must be positive");
}

Tensor Tensor::zeros(std::vector<int> shape) {
    Tensor t;
    t.shape = std::move(shape);
    int64_t n = 1;
    for (int d : t.shape) n *= d;
    t.data.assign(static_cast<size_t>(n), 0.0);
    return t;
}

Tensor& ParamSet::at(const std::string& name) {
    for (auto& [n, t] : tensors) {
        if (n == name) return t;
    }
    throw std::out_of_range("no parameter tensor named " + name);
}

const Tensor& ParamSet::at(const std::string& name) const {
    return const_cast<ParamSet*>(this)->at(name);
}

ParamSet ParamSet::zeros_like() const {
    ParamSet out;
    out.tensors.reserve(tensors.size());
    for (const auto& [n, t] : tensors) out.tensors.emplace_back(n, Tensor::zeros(t.shape));
    return out;
}

ParamSet build_params(const ModelConfig& cfg) {
    cfg.validate();
    ParamSet p;
    auto add = [&](const std::string& name, std::vector<int> shape) {
        p.tensors.emplace_back(name, Tensor::zeros(std::move(shape)));
    };
    for (int f = 0; f < kNumFields; ++f) {
        add(std::string("embed.") + kFieldNames[f], {kFieldSizes[f], cfg.field_embed[f]});
    }
    add("proj_in.w", {cfg.embed_concat(), cfg.d_model});
    add("proj_in.b", {cfg.d_model});
    add("pos", {cfg.max_len, cfg.d_model});
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "layer" + std::to_string(l) + ".";
        add(pre + "ln1.g", {cfg.d_model});
        add(pre + "ln1.b", {cfg.d_model});
        add(pre + "attn.wq", {cfg.d_model, cfg.d_model});
        add(pre + "attn.bq", {cfg.d_model});
        add(pre + "attn.wk", {cfg.d_model, cfg.d_model});
        add(pre + "attn.bk", {cfg.d_model});
        add(pre + "attn.wv", {cfg.d_model, cfg.d_model});
        add(pre + "attn.bv", {cfg.d_model});
        add(pre + "attn.wo", {cfg.d_model, cfg.d_model});
        add(pre + "attn.bo", {cfg.d_model});
        add(pre + "ln2.g", {cfg.d_model});
        add(pre + "ln2.b", {cfg.d_model});
        add(pre + "mlp.w1", {cfg.d_model, cfg.hidden()});
        add(pre + "mlp.b1", {cfg.hidden()});
        add(pre + "mlp.w2", {cfg.hidden(), cfg.d_model});
        add(pre + "mlp.b2", {cfg.d_model});
    }
    add("ln_f.g", {cfg.d_model});
    add("ln_f.b", {cfg.d_model});
    for (int f = 0; f < kNumFields; ++f) {
        add(std::string("head.") + kFieldNames[f] + ".w", {cfg.d_model, kFieldSizes[f]});
        add(std::string("head.") + kFieldNames[f] + ".b", {kFieldSizes[f]});
    }
    return p;
}

void init_params(ParamSet& params, const ModelConfig& cfg, std::mt19937_64& rng) {
    (void)cfg;
    std::normal_distribution<double> dist(0.0, 0.02);
    for (auto& [name, t] : params.tensors) {
        if (t.shape.size() >= 2) {
            for (double& v : t.data) v = dist(rng);
        } else if (name.ends_with("ln1.g") || name.ends_with("ln2.g") ||
                   name.ends_with("ln_f.g")) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        } else {
            std::fill(t.data.begin(), t.data.end(), 0.0);
        }
    }
}

std::vector<uint8_t> target_active_mask(const std::vector<IdRecord>& seq) {
    std::vector<uint8_t> mask(seq.size(), 0);
    // active[r]: whether record r counts as a prediction target
    std::vector<uint8_t> active(seq.size(), 0);
    bool tgt_side = false;
    for (size_t r = 0; r < seq.size(); ++r) {
        SuperToken tok = token_from_ids(seq[r]);
        auto fam = classify_family(tok);
        if (!fam) continue;
        switch (*fam) {
            case Family::Spec:
                active[r] = (tok.spec == kSpecEos);
                break;
            case Family::BarMark:
                active[r] = 1;
                tgt_side = (tok.bar == kBarTgt);
                break;
            case Family::Metric:
            case Family::Note:
                active[r] = tgt_side ? 1 : 0;
                break;
        }
    }
    for (size_t t = 0; t + 1 < seq.size(); ++t) mask[t] = active[t + 1];
    return mask;
}

namespace {

namespace K = picogen::kernels;

struct LayerCache {
    std::vector<double> h1, q, k, v, attn, ctx, x_attn, h2, u, g, x_out;
    std::vector<double> mean1, rstd1, mean2, rstd2;
};

struct ForwardCache {
    int T = 0;
    std::vector<double> ecat, x0, xf, meanf, rstdf;
    std::vector<LayerCache> layers;
};

void layernorm_forward(const double* x, const double* gamma, const double* beta, double* y,
                       double* mean, double* rstd, int T, int D) {
    for (int t = 0; t < T; ++t) {
        const double* xt = x + size_t(t) * D;
        double* yt = y + size_t(t) * D;
        double mu = 0.0;
        for (int d = 0; d < D; ++d) mu += xt[d];
        mu /= D;
        double var = 0.0;
        for (int d = 0; d < D; ++d) {
            double c = xt[d] - mu;
            var += c * c;
        }
        var /= D;
        double rs = 1.0 / std::sqrt(var + kLnEps);
        mean[t] = mu;
        rstd[t] = rs;
        for (int d = 0; d < D; ++d) yt[d] = gamma[d] * (xt[d] - mu) * rs + beta[d];
    }
}

void layernorm_backward(const double* dy, const double* x, const double* gamma,
                        const double* mean, const double* rstd, double* dx, double* dgamma,
                        double* dbeta, int T, int D) {
    for (int t = 0; t < T; ++t) {
        const double* dyt = dy + size_t(t) * D;
        const double* xt = x + size_t(t) * D;
        double* dxt = dx + size_t(t) * D;
        double mu = mean[t];
        double rs = rstd[t];
        double m1 = 0.0;  // mean(dxhat)
        double m2 = 0.0;  // mean(dxhat * xhat)
        for (int d = 0; d < D; ++d) {
            double xhat = (xt[d] - mu) * rs;
            double dxhat = dyt[d] * gamma[d];
            m1 += dxhat;
            m2 += dxhat * xhat;
            dgamma[d] += dyt[d] * xhat;
            dbeta[d] += dyt[d];
        }
        m1 /= D;
        m2 /= D;
        for (int d = 0; d < D; ++d) {
            double xhat = (xt[d] - mu) * rs;
            double dxhat = dyt[d] * gamma[d];
            dxt[d] += rs * (dxhat - m1 - xhat * m2);
        }
    }
}

void add_bias_rows(double* x, const double* b, int T, int D) {
    for (int t = 0; t < T; ++t) {
        double* xt = x + size_t(t) * D;
        for (int d = 0; d < D; ++d) xt[d] += b[d];
    }
}

void bias_grad_colsum(const double* dy, double* db, int T, int D) {
    for (int t = 0; t < T; ++t) {
        const double* dyt = dy + size_t(t) * D;
        for (int d = 0; d < D; ++d) db[d] += dyt[d];
    }
}

void copy_head(const double* src, double* dst, int T, int D, int head, int dh, double scale) {
    for (int t = 0; t < T; ++t) {
        const double* s = src + size_t(t) * D + size_t(head) * dh;
        double* d = dst + size_t(t) * dh;
        for (int i = 0; i < dh; ++i) d[i] = s[i] * scale;
    }
}

void add_head_back(const double* src, double* dst, int T, int D, int head, int dh,
                   double scale) {
    for (int t = 0; t < T; ++t) {
        const double* s = src + size_t(t) * dh;
        double* d = dst + size_t(t) * D + size_t(head) * dh;
        for (int i = 0; i < dh; ++i) d[i] += s[i] * scale;
    }
}

}  // namespace

Model::Model(const ModelConfig& cfg) : cfg_(cfg), params_(build_params(cfg)) {
    std::mt19937_64 rng(cfg.seed);
    init_params(params_, cfg_, rng);
}

Model::Model(const ModelConfig& cfg, ParamSet params) : cfg_(cfg), params_(std::move(params)) {
    cfg_.validate();
}

std::vector<double> Model::embed_record(const IdRecord& ids) const {
    int E = cfg_.embed_concat();
    int D = cfg_.d_model;
    std::vector<double> cat(E);
    int off = 0;
    for (int f = 0; f < kNumFields; ++f) {
        const Tensor& emb = params_.at(std::string("embed.") + kFieldNames[f]);
        int e = cfg_.field_embed[f];
        int id = ids[f];
        if (id < 0 || id >= kFieldSizes[f]) {
            throw std::out_of_range(std::string("id out of range for field ") + kFieldNames[f]);
        }
        std::memcpy(cat.data() + off, emb.ptr() + size_t(id) * e, sizeof(double) * e);
        off += e;
    }
    std::vector<double> out(D);
    const Tensor& w = params_.at("proj_in.w");
    const Tensor& b = params_.at("proj_in.b");
    K::matmul_nn(cat.data(), w.ptr(), out.data(), 1, E, D);
    for (int d = 0; d < D; ++d) out[d] += b.data[d];
    return out;
}

namespace {

// Runs the causal stack over one sequence, filling the cache.
void run_forward(const ModelConfig& cfg, const ParamSet& params,
                 const std::vector<IdRecord>& seq, ForwardCache& fc) {
    const int T = static_cast<int>(seq.size());
    const int D = cfg.d_model;
    const int E = cfg.embed_concat();
    const int H = cfg.n_heads;
    const int dh = D / H;
    const int M = cfg.hidden();
    if (T == 0) throw std::invalid_argument("empty sequence");
    if (T > cfg.max_len) {
        throw std::length_error("sequence length " + std::to_string(T) + " exceeds max_len " +
                                std::to_string(cfg.max_len));
    }

    fc.T = T;
    fc.ecat.assign(size_t(T) * E, 0.0);
    for (int t = 0; t < T; ++t) {
        int off = 0;
        for (int f = 0; f < kNumFields; ++f) {
            const Tensor& emb = params.at(std::string("embed.") + kFieldNames[f]);
            int e = cfg.field_embed[f];
            int id = seq[t][f];
            if (id < 0 || id >= kFieldSizes[f]) {
                throw std::out_of_range(std::string("id out of range for field ") +
                                        kFieldNames[f]);
            }
            std::memcpy(fc.ecat.data() + size_t(t) * E + off, emb.ptr() + size_t(id) * e,
                        sizeof(double) * e);
            off += e;
        }
    }

    fc.x0.assign(size_t(T) * D, 0.0);
    K::matmul_nn(fc.ecat.data(), params.at("proj_in.w").ptr(), fc.x0.data(), T, E, D);
    add_bias_rows(fc.x0.data(), params.at("proj_in.b").ptr(), T, D);
    const Tensor& pos = params.at("pos");
    for (int t = 0; t < T; ++t) {
        for (int d = 0; d < D; ++d) fc.x0[size_t(t) * D + d] += pos.data[size_t(t) * D + d];
    }

    fc.layers.assign(cfg.n_layers, {});
    const double scale = 1.0 / std::sqrt(double(dh));
    const std::vector<double>* x_in = &fc.x0;
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerCache& lc = fc.layers[l];
        std::string pre = "layer" + std::to_string(l) + ".";
        lc.h1.assign(size_t(T) * D, 0.0);
        lc.mean1.assign(T, 0.0);
        lc.rstd1.assign(T, 0.0);
        layernorm_forward(x_in->data(), params.at(pre + "ln1.g").ptr(),
                          params.at(pre + "ln1.b").ptr(), lc.h1.data(), lc.mean1.data(),
                          lc.rstd1.data(), T, D);

        lc.q.assign(size_t(T) * D, 0.0);
        lc.k.assign(size_t(T) * D, 0.0);
        lc.v.assign(size_t(T) * D, 0.0);
        K::matmul_nn(lc.h1.data(), params.at(pre + "attn.wq").ptr(), lc.q.data(), T, D, D);
        K::matmul_nn(lc.h1.data(), params.at(pre + "attn.wk").ptr(), lc.k.data(), T, D, D);
        K::matmul_nn(lc.h1.data(), params.at(pre + "attn.wv").ptr(), lc.v.data(), T, D, D);
        add_bias_rows(lc.q.data(), params.at(pre + "attn.bq").ptr(), T, D);
        add_bias_rows(lc.k.data(), params.at(pre + "attn.bk").ptr(), T, D);
        add_bias_rows(lc.v.data(), params.at(pre + "attn.bv").ptr(), T, D);

        lc.attn.assign(size_t(H) * T * T, 0.0);
        lc.ctx.assign(size_t(T) * D, 0.0);
        std::vector<double> qh(size_t(T) * dh), kh(size_t(T) * dh), vh(size_t(T) * dh),
            ch(size_t(T) * dh);
        for (int h = 0; h < H; ++h) {
            copy_head(lc.q.data(), qh.data(), T, D, h, dh, scale);
            copy_head(lc.k.data(), kh.data(), T, D, h, dh, 1.0);
            copy_head(lc.v.data(), vh.data(), T, D, h, dh, 1.0);
            double* attn_h = lc.attn.data() + size_t(h) * T * T;
            K::matmul_nt(qh.data(), kh.data(), attn_h, T, dh, T);
            K::causal_softmax(attn_h, T);
            K::matmul_nn(attn_h, vh.data(), ch.data(), T, T, dh);
            add_head_back(ch.data(), lc.ctx.data(), T, D, h, dh, 1.0);
        }

        lc.x_attn.assign(size_t(T) * D, 0.0);
        K::matmul_nn(lc.ctx.data(), params.at(pre + "attn.wo").ptr(), lc.x_attn.data(), T, D, D);
        add_bias_rows(lc.x_attn.data(), params.at(pre + "attn.bo").ptr(), T, D);
        for (size_t i = 0; i < lc.x_attn.size(); ++i) lc.x_attn[i] += (*x_in)[i];

        lc.h2.assign(size_t(T) * D, 0.0);
        lc.mean2.assign(T, 0.0);
        lc.rstd2.assign(T, 0.0);
        layernorm_forward(lc.x_attn.data(), params.at(pre + "ln2.g").ptr(),
                          params.at(pre + "ln2.b").ptr(), lc.h2.data(), lc.mean2.data(),
                          lc.rstd2.data(), T, D);

        lc.u.assign(size_t(T) * M, 0.0);
        K::matmul_nn(lc.h2.data(), params.at(pre + "mlp.w1").ptr(), lc.u.data(), T, D, M);
        add_bias_rows(lc.u.data(), params.at(pre + "mlp.b1").ptr(), T, M);
        lc.g.resize(size_t(T) * M);
        for (size_t i = 0; i < lc.g.size(); ++i) lc.g[i] = gelu(lc.u[i]);

        lc.x_out.assign(size_t(T) * D, 0.0);
        K::matmul_nn(lc.g.data(), params.at(pre + "mlp.w2").ptr(), lc.x_out.data(), T, M, D);
        add_bias_rows(lc.x_out.data(), params.at(pre + "mlp.b2").ptr(), T, D);
        for (size_t i = 0; i < lc.x_out.size(); ++i) lc.x_out[i] += lc.x_attn[i];

        x_in = &lc.x_out;
    }

    fc.xf.assign(size_t(T) * D, 0.0);
    fc.meanf.assign(T, 0.0);
    fc.rstdf.assign(T, 0.0);
    layernorm_forward(x_in->data(), params.at("ln_f.g").ptr(), params.at("ln_f.b").ptr(),
                      fc.xf.data(), fc.meanf.data(), fc.rstdf.data(), T, D);
}

// Backward through the stack given d(xf); accumulates into grads.
void run_backward(const ModelConfig& cfg, const ParamSet& params, const ForwardCache& fc,
                  const std::vector<IdRecord>& seq, std::vector<double> dxf, ParamSet& grads) {
    const int T = fc.T;
    const int D = cfg.d_model;
    const int E = cfg.embed_concat();
    const int H = cfg.n_heads;
    const int dh = D / H;
    const int M = cfg.hidden();
    const double scale = 1.0 / std::sqrt(double(dh));

    const std::vector<double>* x_last =
        cfg.n_layers > 0 ? &fc.layers.back().x_out : &fc.x0;
    std::vector<double> dx(size_t(T) * D, 0.0);
    layernorm_backward(dxf.data(), x_last->data(), params.at("ln_f.g").ptr(), fc.meanf.data(),
                       fc.rstdf.data(), dx.data(), grads.at("ln_f.g").ptr(),
                       grads.at("ln_f.b").ptr(), T, D);

    std::vector<double> tbuf(size_t(T) * std::max(D, M));        // activation grads
    std::vector<double> wbuf(size_t(std::max(M, D)) * std::max(M, D));  // weight grads
    for (int l = cfg.n_layers - 1; l >= 0; --l) {
        const LayerCache& lc = fc.layers[l];
        const std::vector<double>* x_in = l > 0 ? &fc.layers[l - 1].x_out : &fc.x0;
        std::string pre = "layer" + std::to_string(l) + ".";

        // MLP branch: x_out = x_attn + g @ w2 + b2
        std::vector<double> dg(size_t(T) * M, 0.0);
        K::matmul_nt(dx.data(), params.at(pre + "mlp.w2").ptr(), dg.data(), T, D, M);
        K::matmul_tn(lc.g.data(), dx.data(), wbuf.data(), M, T, D);
        {
            Tensor& gw2 = grads.at(pre + "mlp.w2");
            for (size_t i = 0; i < gw2.data.size(); ++i) gw2.data[i] += wbuf[i];
        }
        bias_grad_colsum(dx.data(), grads.at(pre + "mlp.b2").ptr(), T, D);

        std::vector<double>& du = dg;  // in place through the activation
        for (size_t i = 0; i < du.size(); ++i) du[i] *= gelu_grad(lc.u[i]);

        bias_grad_colsum(du.data(), grads.at(pre + "mlp.b1").ptr(), T, M);
        std::vector<double> dh2(size_t(T) * D, 0.0);
        K::matmul_nt(du.data(), params.at(pre + "mlp.w1").ptr(), dh2.data(), T, M, D);
        K::matmul_tn(lc.h2.data(), du.data(), wbuf.data(), D, T, M);
        {
            Tensor& gw1 = grads.at(pre + "mlp.w1");
            for (size_t i = 0; i < gw1.data.size(); ++i) gw1.data[i] += wbuf[i];
        }

        // dx currently holds d(x_out); residual passes it to x_attn, plus LN2 path.
        layernorm_backward(dh2.data(), lc.x_attn.data(), params.at(pre + "ln2.g").ptr(),
                           lc.mean2.data(), lc.rstd2.data(), dx.data(),
                           grads.at(pre + "ln2.g").ptr(), grads.at(pre + "ln2.b").ptr(), T, D);

        // Attention branch: x_attn = x_in + ctx @ wo + bo
        std::vector<double> dctx(size_t(T) * D, 0.0);
        K::matmul_nt(dx.data(), params.at(pre + "attn.wo").ptr(), dctx.data(), T, D, D);
        K::matmul_tn(lc.ctx.data(), dx.data(), wbuf.data(), D, T, D);
        {
            Tensor& gwo = grads.at(pre + "attn.wo");
            for (size_t i = 0; i < gwo.data.size(); ++i) gwo.data[i] += wbuf[i];
        }
        bias_grad_colsum(dx.data(), grads.at(pre + "attn.bo").ptr(), T, D);

        std::vector<double> dq(size_t(T) * D, 0.0), dk(size_t(T) * D, 0.0),
            dv(size_t(T) * D, 0.0);
        std::vector<double> qh(size_t(T) * dh), kh(size_t(T) * dh), vh(size_t(T) * dh);
        std::vector<double> dch(size_t(T) * dh), dattn(size_t(T) * T), dsh(size_t(T) * dh);
        for (int h = 0; h < H; ++h) {
            copy_head(lc.q.data(), qh.data(), T, D, h, dh, scale);
            copy_head(lc.k.data(), kh.data(), T, D, h, dh, 1.0);
            copy_head(lc.v.data(), vh.data(), T, D, h, dh, 1.0);
            copy_head(dctx.data(), dch.data(), T, D, h, dh, 1.0);
            const double* attn_h = lc.attn.data() + size_t(h) * T * T;

            K::matmul_nt(dch.data(), vh.data(), dattn.data(), T, dh, T);
            K::matmul_tn(attn_h, dch.data(), dsh.data(), T, T, dh);
            add_head_back(dsh.data(), dv.data(), T, D, h, dh, 1.0);

            // softmax backward (masked tail of attn is 0, so ds vanishes there)
            for (int t = 0; t < T; ++t) {
                const double* arow = attn_h + size_t(t) * T;
                double* drow = dattn.data() + size_t(t) * T;
                double dot = 0.0;
                for (int j = 0; j <= t; ++j) dot += arow[j] * drow[j];
                for (int j = 0; j < T; ++j) drow[j] = arow[j] * (drow[j] - dot);
            }

            K::matmul_nn(dattn.data(), kh.data(), dsh.data(), T, T, dh);
            add_head_back(dsh.data(), dq.data(), T, D, h, dh, scale);
            K::matmul_tn(dattn.data(), qh.data(), dsh.data(), T, T, dh);
            add_head_back(dsh.data(), dk.data(), T, D, h, dh, 1.0);
        }

        std::vector<double> dh1(size_t(T) * D, 0.0);
        auto qkv_back = [&](const std::vector<double>& dmat, const char* wname,
                            const char* bname) {
            K::matmul_nt(dmat.data(), params.at(pre + wname).ptr(), tbuf.data(), T, D, D);
            for (size_t i = 0; i < dh1.size(); ++i) dh1[i] += tbuf[i];
            K::matmul_tn(lc.h1.data(), dmat.data(), wbuf.data(), D, T, D);
            Tensor& gw = grads.at(pre + wname);
            for (size_t i = 0; i < gw.data.size(); ++i) gw.data[i] += wbuf[i];
            bias_grad_colsum(dmat.data(), grads.at(pre + bname).ptr(), T, D);
        };
        qkv_back(dq, "attn.wq", "attn.bq");
        qkv_back(dk, "attn.wk", "attn.bk");
        qkv_back(dv, "attn.wv", "attn.bv");

        layernorm_backward(dh1.data(), x_in->data(), params.at(pre + "ln1.g").ptr(),
                           lc.mean1.data(), lc.rstd1.data(), dx.data(),
                           grads.at(pre + "ln1.g").ptr(), grads.at(pre + "ln1.b").ptr(), T, D);
    }

    // dx is now d(x0) = d(ecat @ W + b + pos)
    {
        Tensor& gpos = grads.at("pos");
        for (int t = 0; t < T; ++t) {
            for (int d = 0; d < D; ++d) gpos.data[size_t(t) * D + d] += dx[size_t(t) * D + d];
        }
    }
    bias_grad_colsum(dx.data(), grads.at("proj_in.b").ptr(), T, D);
    std::vector<double> decat(size_t(T) * E, 0.0);
    K::matmul_nt(dx.data(), params.at("proj_in.w").ptr(), decat.data(), T, D, E);
    std::vector<double> dwin(size_t(E) * D, 0.0);
    K::matmul_tn(fc.ecat.data(), dx.data(), dwin.data(), E, T, D);
    {
        Tensor& gw = grads.at("proj_in.w");
        for (size_t i = 0; i < gw.data.size(); ++i) gw.data[i] += dwin[i];
    }
    int off = 0;
    for (int f = 0; f < kNumFields; ++f) {
        Tensor& gemb = grads.at(std::string("embed.") + kFieldNames[f]);
        int e = cfg.field_embed[f];
        for (int t = 0; t < T; ++t) {
            int id = seq[t][f];
            double* row = gemb.ptr() + size_t(id) * e;
            const double* src = decat.data() + size_t(t) * E + off;
            for (int i = 0; i < e; ++i) row[i] += src[i];
        }
        off += e;
    }
}

// Cross-entropy over the 8 heads with target masking; fills dxf when grads
// are requested. Returns the summed (unnormalized) loss and match count.
struct HeadLossResult {
    double total = 0.0;
    std::array<double, kNumFields> per_field{};
};

HeadLossResult head_loss(const ModelConfig& cfg, const ParamSet& params, const ForwardCache& fc,
                         const std::vector<IdRecord>& seq, const std::vector<uint8_t>& mask,
                         double inv_count, std::vector<double>* dxf, ParamSet* grads) {
    const int T = fc.T;
    const int D = cfg.d_model;
    HeadLossResult res;
    std::vector<double> logits, dlogits;
    for (int f = 0; f < kNumFields; ++f) {
        const int V = kFieldSizes[f];
        const Tensor& w = params.at(std::string("head.") + kFieldNames[f] + ".w");
        const Tensor& b = params.at(std::string("head.") + kFieldNames[f] + ".b");
        logits.assign(size_t(T) * V, 0.0);
        K::matmul_nn(fc.xf.data(), w.ptr(), logits.data(), T, D, V);
        add_bias_rows(logits.data(), b.ptr(), T, V);

        if (grads) dlogits.assign(size_t(T) * V, 0.0);
        for (int t = 0; t + 1 < T; ++t) {
            if (!mask[t]) continue;
            int target = seq[t + 1][f];
            if (target == 0) continue;  // IGNORE target: field masked
            double* row = logits.data() + size_t(t) * V;
            double mx = row[0];
            for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
            double sum = 0.0;
            for (int j = 0; j < V; ++j) sum += std::exp(row[j] - mx);
            double lse = std::log(sum) + mx;
            double ce = lse - row[target];
            res.total += ce;
            res.per_field[f] += ce;
            if (grads) {
                double* drow = dlogits.data() + size_t(t) * V;
                for (int j = 0; j < V; ++j) {
                    drow[j] = std::exp(row[j] - lse) * inv_count;
                }
                drow[target] -= inv_count;
            }
        }
        if (grads) {
            Tensor& gw = grads->at(std::string("head.") + kFieldNames[f] + ".w");
            std::vector<double> dw(size_t(D) * V, 0.0);
            K::matmul_tn(fc.xf.data(), dlogits.data(), dw.data(), D, T, V);
            for (size_t i = 0; i < gw.data.size(); ++i) gw.data[i] += dw[i];
            bias_grad_colsum(dlogits.data(), grads->at(std::string("head.") + kFieldNames[f] + ".b").ptr(),
                             T, V);
            std::vector<double> dxf_part(size_t(T) * D, 0.0);
            K::matmul_nt(dlogits.data(), w.ptr(), dxf_part.data(), T, V, D);
            for (size_t i = 0; i < dxf->size(); ++i) (*dxf)[i] += dxf_part[i];
        }
    }
    return res;
}

}  // namespace

FieldLogits Model::forward(const std::vector<IdRecord>& seq) const {
    ForwardCache fc;
    run_forward(cfg_, params_, seq, fc);
    FieldLogits out;
    for (int f = 0; f < kNumFields; ++f) {
        const int V = kFieldSizes[f];
        out[f] = Tensor::zeros({fc.T, V});
        const Tensor& w = params_.at(std::string("head.") + kFieldNames[f] + ".w");
        const Tensor& b = params_.at(std::string("head.") + kFieldNames[f] + ".b");
        K::matmul_nn(fc.xf.data(), w.ptr(), out[f].ptr(), fc.T, cfg_.d_model, V);
        add_bias_rows(out[f].ptr(), b.ptr(), fc.T, V);
    }
    return out;
}

namespace {

double batch_loss_impl(const ModelConfig& cfg, const ParamSet& params,
                       const std::vector<std::vector<IdRecord>>& batch, ParamSet* grads,
                       std::array<double, kNumFields>* field_losses) {
    int64_t count = 0;
    for (const auto& seq : batch) {
        auto mask = target_active_mask(seq);
        for (uint8_t m : mask) count += m;
    }
    if (field_losses) field_losses->fill(0.0);
    if (count == 0) return 0.0;
    double inv_count = 1.0 / double(count);

    double total = 0.0;
    for (const auto& seq : batch) {
        ForwardCache fc;
        run_forward(cfg, params, seq, fc);
        auto mask = target_active_mask(seq);
        std::vector<double> dxf;
        if (grads) dxf.assign(size_t(fc.T) * cfg.d_model, 0.0);
        auto r = head_loss(cfg, params, fc, seq, mask, inv_count, grads ? &dxf : nullptr,
                           grads);
        total += r.total;
        if (field_losses) {
            for (int f = 0; f < kNumFields; ++f) (*field_losses)[f] += r.per_field[f] * inv_count;
        }
        if (grads) run_backward(cfg, params, fc, seq, std::move(dxf), *grads);
    }
    return total * inv_count;
}

}  // namespace

double Model::loss(const std::vector<std::vector<IdRecord>>& batch) const {
    return batch_loss_impl(cfg_, params_, batch, nullptr, nullptr);
}

double Model::loss_and_grad(const std::vector<std::vector<IdRecord>>& batch, ParamSet& grads,
                            std::array<double, kNumFields>* field_losses) const {
    for (auto& [name, t] : grads.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
    return batch_loss_impl(cfg_, params_, batch, &grads, field_losses);
}

DecodeSession::DecodeSession(const Model& model) : model_(model) {
    const ModelConfig& cfg = model.config();
    k_cache_.assign(cfg.n_layers, {});
    v_cache_.assign(cfg.n_layers, {});
    for (int l = 0; l < cfg.n_layers; ++l) {
        k_cache_[l].reserve(size_t(cfg.max_len) * cfg.d_model);
        v_cache_[l].reserve(size_t(cfg.max_len) * cfg.d_model);
    }
}

void DecodeSession::reset() {
    len_ = 0;
    for (auto& c : k_cache_) c.clear();
    for (auto& c : v_cache_) c.clear();
}

const std::array<std::vector<double>, kNumFields>& DecodeSession::append(const IdRecord& ids) {
    const ModelConfig& cfg = model_.config();
    const ParamSet& params = model_.params();
    const int D = cfg.d_model;
    const int H = cfg.n_heads;
    const int dh = D / H;
    const int M = cfg.hidden();
    const int t = len_;
    if (t >= cfg.max_len) throw std::length_error("decode session exceeded max_len");

    std::vector<double> x = model_.embed_record(ids);
    const Tensor& pos = params.at("pos");
    for (int d = 0; d < D; ++d) x[d] += pos.data[size_t(t) * D + d];

    std::vector<double> h(D), q(D), kv(D), mean(1), rstd(1);
    const double scale = 1.0 / std::sqrt(double(dh));
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string pre = "layer" + std::to_string(l) + ".";
        layernorm_forward(x.data(), params.at(pre + "ln1.g").ptr(),
                          params.at(pre + "ln1.b").ptr(), h.data(), mean.data(), rstd.data(), 1,
                          D);
        K::matmul_nn(h.data(), params.at(pre + "attn.wq").ptr(), q.data(), 1, D, D);
        for (int d = 0; d < D; ++d) q[d] += params.at(pre + "attn.bq").data[d];
        auto& kc = k_cache_[l];
        auto& vc = v_cache_[l];
        kc.resize(size_t(t + 1) * D);
        vc.resize(size_t(t + 1) * D);
        K::matmul_nn(h.data(), params.at(pre + "attn.wk").ptr(), kv.data(), 1, D, D);
        for (int d = 0; d < D; ++d) kc[size_t(t) * D + d] = kv[d] + params.at(pre + "attn.bk").data[d];
        K::matmul_nn(h.data(), params.at(pre + "attn.wv").ptr(), kv.data(), 1, D, D);
        for (int d = 0; d < D; ++d) vc[size_t(t) * D + d] = kv[d] + params.at(pre + "attn.bv").data[d];

        std::vector<double> ctx(D, 0.0);
        std::vector<double> scores(t + 1);
        for (int head = 0; head < H; ++head) {
            const int hoff = head * dh;
            for (int j = 0; j <= t; ++j) {
                double acc = 0.0;
                const double* kj = kc.data() + size_t(j) * D + hoff;
                for (int i = 0; i < dh; ++i) acc += q[hoff + i] * scale * kj[i];
                scores[j] = acc;
            }
            // softmax over 0..t
            double mx = scores[0];
            for (int j = 1; j <= t; ++j) mx = std::max(mx, scores[j]);
            double sum = 0.0;
            for (int j = 0; j <= t; ++j) {
                scores[j] = std::exp(scores[j] - mx);
                sum += scores[j];
            }
            double inv = 1.0 / sum;
            for (int j = 0; j <= t; ++j) scores[j] *= inv;
            for (int j = 0; j <= t; ++j) {
                const double* vj = vc.data() + size_t(j) * D + hoff;
                double a = scores[j];
                for (int i = 0; i < dh; ++i) ctx[hoff + i] += a * vj[i];
            }
        }
        std::vector<double> o(D, 0.0);
        K::matmul_nn(ctx.data(), params.at(pre + "attn.wo").ptr(), o.data(), 1, D, D);
        for (int d = 0; d < D; ++d) x[d] += o[d] + params.at(pre + "attn.bo").data[d];

        layernorm_forward(x.data(), params.at(pre + "ln2.g").ptr(),
                          params.at(pre + "ln2.b").ptr(), h.data(), mean.data(), rstd.data(), 1,
                          D);
        std::vector<double> u(M, 0.0);
        K::matmul_nn(h.data(), params.at(pre + "mlp.w1").ptr(), u.data(), 1, D, M);
        for (int i = 0; i < M; ++i) u[i] = gelu(u[i] + params.at(pre + "mlp.b1").data[i]);
        std::vector<double> mo(D, 0.0);
        K::matmul_nn(u.data(), params.at(pre + "mlp.w2").ptr(), mo.data(), 1, M, D);
        for (int d = 0; d < D; ++d) x[d] += mo[d] + params.at(pre + "mlp.b2").data[d];
    }

    layernorm_forward(x.data(), params.at("ln_f.g").ptr(), params.at("ln_f.b").ptr(), h.data(),
                      mean.data(), rstd.data(), 1, D);
    for (int f = 0; f < kNumFields; ++f) {
        const int V = kFieldSizes[f];
        logits_[f].assign(V, 0.0);
        const Tensor& w = params.at(std::string("head.") + kFieldNames[f] + ".w");
        const Tensor& b = params.at(std::string("head.") + kFieldNames[f] + ".b");
        K::matmul_nn(h.data(), w.ptr(), logits_[f].data(), 1, D, V);
        for (int j = 0; j < V; ++j) logits_[f][j] += b.data[j];
    }
    ++len_;
    return logits_;
}

namespace {

double global_grad_norm(const ParamSet& grads) {
    double sq = 0.0;
    for (const auto& [name, t] : grads.tensors) {
        for (double v : t.data) sq += v * v;
    }
    return std::sqrt(sq);
}

void adamw_update(TrainState& st, const ParamSet& grads, double lr, const ModelConfig& cfg,
                  double clip_scale) {
    double b1 = cfg.adam_beta1;
    double b2 = cfg.adam_beta2;
    double bc1 = 1.0 - std::pow(b1, double(st.step));
    double bc2 = 1.0 - std::pow(b2, double(st.step));
    for (size_t i = 0; i < st.params.tensors.size(); ++i) {
        Tensor& w = st.params.tensors[i].second;
        const Tensor& g = grads.tensors[i].second;
        Tensor& m = st.adam_m.tensors[i].second;
        Tensor& v = st.adam_v.tensors[i].second;
        bool decay = w.shape.size() >= 2;
        for (size_t j = 0; j < w.data.size(); ++j) {
            double gj = g.data[j] * clip_scale;
            m.data[j] = b1 * m.data[j] + (1.0 - b1) * gj;
            v.data[j] = b2 * v.data[j] + (1.0 - b2) * gj * gj;
            double mhat = m.data[j] / bc1;
            double vhat = v.data[j] / bc2;
            double upd = mhat / (std::sqrt(vhat) + cfg.adam_eps);
            if (decay) upd += cfg.weight_decay * w.data[j];
            w.data[j] -= lr * upd;
        }
    }
}

}  // namespace

TrainResult train(const std::vector<std::vector<IdRecord>>& dataset, const ModelConfig& cfg) {
    cfg.validate();
    if (dataset.empty()) throw std::invalid_argument("training dataset is empty");
    for (const auto& seq : dataset) {
        if (static_cast<int>(seq.size()) > cfg.max_len) {
            throw std::length_error("dataset window exceeds max_len");
        }
    }

    TrainResult res;
    res.state.config = cfg;
    res.state.rng.seed(cfg.seed);
    res.state.params = build_params(cfg);
    init_params(res.state.params, cfg, res.state.rng);
    res.state.adam_m = res.state.params.zeros_like();
    res.state.adam_v = res.state.params.zeros_like();

    Model model(cfg, std::move(res.state.params));
    ParamSet grads = model.params().zeros_like();

    std::vector<size_t> order(dataset.size());
    std::iota(order.begin(), order.end(), size_t(0));

    bool done = false;
    for (int epoch = 0; !done && (cfg.epochs == 0 || epoch < cfg.epochs); ++epoch) {
        std::shuffle(order.begin(), order.end(), res.state.rng);
        for (size_t at = 0; at < order.size() && !done; at += cfg.batch_size) {
            std::vector<std::vector<IdRecord>> batch;
            size_t end = std::min(order.size(), at + size_t(cfg.batch_size));
            for (size_t i = at; i < end; ++i) batch.push_back(dataset[order[i]]);
            ++res.state.step;
            std::array<double, kNumFields> fl{};
            double loss = model.loss_and_grad(batch, grads, &fl);
            if (!std::isfinite(loss)) {
                throw NumericError("non-finite training loss at step " +
                                   std::to_string(res.state.step) +
                                   " (grad norm: " + std::to_string(global_grad_norm(grads)) +
                                   ")");
            }
            double norm = global_grad_norm(grads);
            double clip_scale =
                (cfg.grad_clip > 0 && norm > cfg.grad_clip) ? cfg.grad_clip / norm : 1.0;
            double lr = cfg.learning_rate *
                        std::min(1.0, double(res.state.step) / std::max(1, cfg.warmup_steps));
            adamw_update(res.state, grads, lr, cfg, clip_scale);
            res.curve.push_back({res.state.step, loss, fl});
            if (cfg.target_loss > 0 && loss < cfg.target_loss) done = true;
            if (res.state.step >= cfg.max_steps) done = true;
        }
    }

    res.state.params = std::move(model.params());
    return res;
}

void write_metrics_csv(const std::vector<StepMetrics>& curve, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write metrics file " + path);
    out << "step,loss";
    for (int f = 0; f < kNumFields; ++f) out << "," << kFieldNames[f];
    out << "\n";
    out.precision(17);
    for (const auto& m : curve) {
        out << m.step << "," << m.loss;
        for (int f = 0; f < kNumFields; ++f) out << "," << m.field_loss[f];
        out << "\n";
    }
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},
            {"n_layers", c.n_layers},
            {"n_heads", c.n_heads},
            {"max_len", c.max_len},
            {"mlp_hidden", c.mlp_hidden},
            {"field_embed", c.field_embed},
            {"seed", c.seed},
            {"learning_rate", c.learning_rate},
            {"warmup_steps", c.warmup_steps},
            {"grad_clip", c.grad_clip},
            {"weight_decay", c.weight_decay},
            {"adam_beta1", c.adam_beta1},
            {"adam_beta2", c.adam_beta2},
            {"adam_eps", c.adam_eps},
            {"batch_size", c.batch_size},
            {"max_steps", c.max_steps},
            {"epochs", c.epochs},
            {"target_loss", c.target_loss}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.d_model = j.at("d_model");
    c.n_layers = j.at("n_layers");
    c.n_heads = j.at("n_heads");
    c.max_len = j.at("max_len");
    c.mlp_hidden = j.at("mlp_hidden");
    c.field_embed = j.at("field_embed");
    c.seed = j.at("seed");
    c.learning_rate = j.at("learning_rate");
    c.warmup_steps = j.at("warmup_steps");
    c.grad_clip = j.at("grad_clip");
    c.weight_decay = j.at("weight_decay");
    c.adam_beta1 = j.at("adam_beta1");
    c.adam_beta2 = j.at("adam_beta2");
    c.adam_eps = j.at("adam_eps");
    c.batch_size = j.at("batch_size");
    c.max_steps = j.at("max_steps");
    c.epochs = j.at("epochs");
    c.target_loss = j.at("target_loss");
    return c;
}

constexpr char kCkptMagic[8] = {'P', 'C', 'G', 'C', 'K', 'P', 'T', '1'};

void write_tensors(std::ofstream& out, const ParamSet& ps) {
    for (const auto& [name, t] : ps.tensors) {
        out.write(reinterpret_cast<const char*>(t.data.data()),
                  static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
}

void read_tensors(std::ifstream& in, ParamSet& ps) {
    for (auto& [name, t] : ps.tensors) {
        in.read(reinterpret_cast<char*>(t.data.data()),
                static_cast<std::streamsize>(t.data.size() * sizeof(double)));
    }
}

}  // namespace

void save_checkpoint(const TrainState& state, const std::string& path) {
    nlohmann::json header;
    header["config"] = config_to_json(state.config);
    header["step"] = state.step;
    std::ostringstream rs;
    rs << state.rng;
    header["rng"] = rs.str();
    header["tensors"] = nlohmann::json::array();
    for (const auto& [name, t] : state.params.tensors) {
        header["tensors"].push_back({{"name", name}, {"shape", t.shape}});
    }
    std::string hs = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(kCkptMagic, 8);
    uint64_t hlen = hs.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
    write_tensors(out, state.params);
    write_tensors(out, state.adam_m);
    write_tensors(out, state.adam_v);
    if (!out) throw std::runtime_error("failed writing checkpoint " + path);
}

TrainState load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    char magic[8];
    in.read(magic, 8);
    if (!in || std::memcmp(magic, kCkptMagic, 8) != 0) {
        throw std::runtime_error(path + " is not a picogen checkpoint");
    }
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    std::string hs(hlen, '\0');
    in.read(hs.data(), static_cast<std::streamsize>(hlen));
    nlohmann::json header = nlohmann::json::parse(hs);

    TrainState st;
    st.config = config_from_json(header.at("config"));
    st.step = header.at("step");
    std::istringstream rs(header.at("rng").get<std::string>());
    rs >> st.rng;
    st.params = build_params(st.config);
    const auto& tens = header.at("tensors");
    if (tens.size() != st.params.tensors.size()) {
        throw std::runtime_error("checkpoint tensor manifest mismatch");
    }
    for (size_t i = 0; i < st.params.tensors.size(); ++i) {
        if (tens[i].at("name") != st.params.tensors[i].first ||
            tens[i].at("shape").get<std::vector<int>>() != st.params.tensors[i].second.shape) {
            throw std::runtime_error("checkpoint tensor manifest mismatch at index " +
                                     std::to_string(i));
        }
    }
    st.adam_m = st.params.zeros_like();
    st.adam_v = st.params.zeros_like();
    read_tensors(in, st.params);
    read_tensors(in, st.adam_m);
    read_tensors(in, st.adam_v);
    if (!in) throw std::runtime_error("checkpoint " + path + " is truncated");
    return st;
}

namespace {

int sample_categorical(const std::vector<double>& logits, double temperature, double top_p,
                       std::mt19937_64& rng) {
    const int n = static_cast<int>(logits.size());
    if (temperature <= 1e-9) {
        int best = 0;
        for (int i = 1; i < n; ++i) {
            if (logits[i] > logits[best]) best = i;
        }
        return best;
    }
    std::vector<double> p(n);
    double mx = logits[0];
    for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
    double sum = 0.0;
    for (int i = 0; i < n; ++i) {
        p[i] = std::exp((logits[i] - mx) / temperature);
        sum += p[i];
    }
    for (int i = 0; i < n; ++i) p[i] /= sum;

    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](int a, int b) {
        return p[a] != p[b] ? p[a] > p[b] : a < b;
    });
    double cum = 0.0;
    int keep = n;
    for (int i = 0; i < n; ++i) {
        cum += p[idx[i]];
        if (cum >= top_p) {
            keep = i + 1;
            break;
        }
    }
    double mass = 0.0;
    for (int i = 0; i < keep; ++i) mass += p[idx[i]];
    double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng) * mass;
    double acc = 0.0;
    for (int i = 0; i < keep; ++i) {
        acc += p[idx[i]];
        if (u <= acc) return idx[i];
    }
    return idx[keep - 1];
}

struct SampleStep {
    enum class Kind { Content, CloseBar, End } kind;
    SuperToken token;
};

SampleStep sample_step(const std::array<std::vector<double>, kNumFields>& logits,
                       bool last_bar, bool seen_metric, const SamplingConfig& sc,
                       std::mt19937_64& rng) {
    constexpr int kMaxAttempts = 8;
    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        IdRecord ids;
        for (int f = 0; f < kNumFields; ++f) {
            ids[f] = sample_categorical(logits[f], sc.temperature, sc.top_p, rng);
        }
        SuperToken tok = token_from_ids(ids);
        auto fam = classify_family(tok);
        if (!fam) continue;
        switch (*fam) {
            case Family::Spec:
                if (tok.spec == kSpecEos && last_bar) return {SampleStep::Kind::End, {}};
                continue;  // BOS, or EOS before the final bar
            case Family::BarMark:
                if (tok.bar == kBarSrc) return {SampleStep::Kind::CloseBar, {}};
                continue;  // BAR_TGT is teacher-forced, never sampled
            case Family::Metric: {
                SuperToken m = sanitize_to_family(tok, Family::Metric);
                m.tempo = kIgnore;  // piano-side metrics carry neither tempo
                m.chord = kIgnore;  // nor chord
                return {SampleStep::Kind::Content, m};
            }
            case Family::Note: {
                if (!seen_metric) continue;
                SuperToken n = sanitize_to_family(tok, Family::Note);
                if (n.pitch == kIgnore || n.duration == kIgnore || n.velocity == kIgnore) {
                    continue;
                }
                return {SampleStep::Kind::Content, n};
            }
        }
    }
    return {SampleStep::Kind::CloseBar, {}};  // retry budget exhausted: force close
}

}  // namespace

GenerateResult generate(const LeadSheet& leadsheet, const TrainState& state,
                        const SamplingConfig& sampling) {
    if (leadsheet.bars.empty()) throw std::invalid_argument("lead sheet has no bars");
    const ModelConfig& cfg = state.config;
    Model model(cfg, state.params);  // copy: generation never mutates the state
    DecodeSession session(model);
    std::mt19937_64 rng(sampling.seed);

    const int B = static_cast<int>(leadsheet.bars.size());
    const int tempo_bin = tempo_to_bin(leadsheet.tempo_bpm);

    GenerateResult res;
    // Model context mirrors res.sequence until a slide drops old bar pairs.
    std::vector<IdRecord> context;
    std::vector<size_t> bar_starts;  // indices into context of BAR_SRC records

    auto feed = [&](const SuperToken& tok, int bar, Side side) {
        IdRecord ids = token_to_ids(tok);
        if (session.length() >= cfg.max_len) {
            // Slide: keep BOS plus the most recent whole bar pairs.
            size_t cut = 0;
            for (size_t s : bar_starts) {
                if (1 + (context.size() - s) + 1 <= size_t(cfg.max_len)) {
                    cut = s;
                    break;
                }
            }
            if (cut == 0 && !bar_starts.empty()) cut = bar_starts.back();
            std::vector<IdRecord> kept;
            kept.push_back(token_to_ids(SuperToken::bos()));
            kept.insert(kept.end(), context.begin() + cut, context.end());
            std::vector<size_t> new_starts;
            for (size_t s : bar_starts) {
                if (s >= cut) new_starts.push_back(s - cut + 1);
            }
            context = std::move(kept);
            bar_starts = std::move(new_starts);
            session.reset();
            for (const auto& r : context) session.append(r);
        }
        if (tok.bar == kBarSrc) bar_starts.push_back(context.size());
        context.push_back(ids);
        session.append(ids);
        res.sequence.push(tok, bar, side);
    };

    // Prompt: BOS, BAR_SRC, L^1, BAR_TGT.
    feed(SuperToken::bos(), -1, Side::Src);
    for (int k = 0; k < B; ++k) {
        if (k == 0) {
            feed(SuperToken::bar_mark(kBarSrc), k, Side::Src);
        }
        for (const auto& t : encode_leadsheet_bar(leadsheet.bars[k], k == 0, tempo_bin)) {
            feed(t, k, Side::Src);
        }
        feed(SuperToken::bar_mark(kBarTgt), k, Side::Tgt);

        bool last_bar = (k == B - 1);
        bool seen_metric = false;
        int emitted = 0;
        while (true) {
            if (emitted >= sampling.max_tokens_per_bar) {
                ++res.forced_closes;
                break;
            }
            SampleStep step = sample_step(session.logits(), last_bar, seen_metric,
                                          sampling, rng);
            ++res.sampled_tokens;
            if (step.kind == SampleStep::Kind::Content) {
                if (classify_family(step.token) == Family::Metric) seen_metric = true;
                feed(step.token, k, Side::Tgt);
                ++emitted;
                continue;
            }
            break;  // CloseBar or End
        }
        if (!last_bar) feed(SuperToken::bar_mark(kBarSrc), k + 1, Side::Src);
    }
    feed(SuperToken::eos(), -1, Side::Tgt);

    Decoded dec = decode(res.sequence, DecodeMode::Tolerant);
    res.piano = std::move(dec.piano);
    if (static_cast<int>(res.piano.size()) < B) res.piano.resize(B);
    return res;
}

}  // namespace picogen
