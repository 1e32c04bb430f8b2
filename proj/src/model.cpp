#include "iclmt/model.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "iclmt/util.hpp"

namespace iclmt {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr char kCheckpointMagic[8] = {'I', 'C', 'L', 'C', 'K', 'P', 'T', '\0'};
constexpr std::uint32_t kCheckpointVersion = 1;

using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Parameter access

struct Slot {
    const Matrix* value = nullptr;
    Matrix* grad = nullptr;

    const Matrix& w() const { return *value; }
};

class Binder {
public:
    Binder(const ModelParams& params, Gradients* grads) : params_(params), grads_(grads) {}

    Slot operator()(const std::string& name) const {
        const std::size_t i = params_.index_of(name);
        const auto& a = params_.arrays()[i];
        Matrix* g = (grads_ != nullptr && a.trainable) ? &(*grads_)[i] : nullptr;
        return {&a.value, g};
    }

    bool has(const std::string& name) const { return params_.contains(name); }
    bool tracking() const { return grads_ != nullptr; }

private:
    const ModelParams& params_;
    Gradients* grads_;
};

// ---------------------------------------------------------------------------
// Primitive layers

Matrix linear(const Matrix& x, const Slot& w, const Slot& b) {
    Matrix y = x * w.w().transpose();
    y.rowwise() += b.w().row(0);
    return y;
}

Matrix linear_backward(const Matrix& dy, const Matrix& x, const Slot& w, const Slot& b) {
    if (w.grad) {
        w.grad->noalias() += dy.transpose() * x;
    }
    if (b.grad) {
        b.grad->row(0) += dy.colwise().sum();
    }
    return dy * w.w();
}

struct LayerNormCache {
    Matrix xhat;
    Vector rstd;
};

Matrix layer_norm(const Matrix& x, const Slot& g, const Slot& b, LayerNormCache& c) {
    Vector mu = x.rowwise().mean();
    Matrix xc = x.colwise() - mu;
    Vector var = xc.array().square().rowwise().mean();
    c.rstd = (var.array() + kLayerNormEps).rsqrt();
    c.xhat = xc.array().colwise() * c.rstd.array();
    Matrix y = c.xhat.array().rowwise() * g.w().row(0).array();
    y.rowwise() += b.w().row(0);
    return y;
}

Matrix layer_norm_backward(const Matrix& dy, const Slot& g, const Slot& b, const LayerNormCache& c) {
    if (g.grad) {
        g.grad->row(0) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    }
    if (b.grad) {
        b.grad->row(0) += dy.colwise().sum();
    }
    Matrix dxhat = dy.array().rowwise() * g.w().row(0).array();
    Vector m1 = dxhat.rowwise().mean();
    Vector m2 = (dxhat.array() * c.xhat.array()).rowwise().mean();
    Matrix dx = dxhat.colwise() - m1;
    dx.array() -= c.xhat.array().colwise() * m2.array();
    dx.array().colwise() *= c.rstd.array();
    return dx;
}

double gelu(double x) {
    return 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
}

double gelu_grad(double x) {
    static const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * M_PI);
    return 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) + x * std::exp(-0.5 * x * x) * inv_sqrt_2pi;
}

// ---------------------------------------------------------------------------
// Composite blocks

struct AttentionWeights {
    Slot wq, bq, wk, bk, wv, bv, wo, bo;
};

AttentionWeights bind_attention(const Binder& bind, const std::string& p) {
    return {bind(p + ".wq"), bind(p + ".bq"), bind(p + ".wk"), bind(p + ".bk"),
            bind(p + ".wv"), bind(p + ".bv"), bind(p + ".wo"), bind(p + ".bo")};
}

struct AttentionCache {
    Matrix xq, xkv, q, k, v, o;
    std::vector<Matrix> probs;
};

Matrix attention(const AttentionWeights& w, const Matrix& xq, const Matrix& xkv, bool causal, std::size_t heads,
                 AttentionCache& c) {
    c.xq = xq;
    c.xkv = xkv;
    c.q = linear(xq, w.wq, w.bq);
    c.k = linear(xkv, w.wk, w.bk);
    c.v = linear(xkv, w.wv, w.bv);
    const Eigen::Index d = c.q.cols();
    const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    c.o.resize(c.q.rows(), d);
    c.probs.resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
        Matrix s = (c.q.middleCols(off, dh) * c.k.middleCols(off, dh).transpose()) * scale;
        for (Eigen::Index i = 0; i < s.rows(); ++i) {
            const Eigen::Index limit = causal ? std::min<Eigen::Index>(i + 1, s.cols()) : s.cols();
            const double mx = s.row(i).head(limit).maxCoeff();
            double sum = 0.0;
            for (Eigen::Index j = 0; j < s.cols(); ++j) {
                const double e = j < limit ? std::exp(s(i, j) - mx) : 0.0;
                s(i, j) = e;
                sum += e;
            }
            s.row(i) /= sum;
        }
        c.o.middleCols(off, dh).noalias() = s * c.v.middleCols(off, dh);
        c.probs[h] = std::move(s);
    }
    return linear(c.o, w.wo, w.bo);
}

/// Returns (d xq, d xkv).
std::pair<Matrix, Matrix> attention_backward(const Matrix& dy, const AttentionWeights& w, std::size_t heads,
                                             const AttentionCache& c) {
    Matrix d_o = linear_backward(dy, c.o, w.wo, w.bo);
    const Eigen::Index d = c.q.cols();
    const Eigen::Index dh = d / static_cast<Eigen::Index>(heads);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Matrix dq(c.q.rows(), d);
    Matrix dk(c.k.rows(), d);
    Matrix dv(c.v.rows(), d);
    for (std::size_t h = 0; h < heads; ++h) {
        const Eigen::Index off = static_cast<Eigen::Index>(h) * dh;
        const Matrix& p = c.probs[h];
        auto doh = d_o.middleCols(off, dh);
        dv.middleCols(off, dh).noalias() = p.transpose() * doh;
        Matrix dp = doh * c.v.middleCols(off, dh).transpose();
        Vector row_dot = (dp.array() * p.array()).rowwise().sum();
        Matrix ds = (p.array() * (dp.colwise() - row_dot).array()) * scale;
        dq.middleCols(off, dh).noalias() = ds * c.k.middleCols(off, dh);
        dk.middleCols(off, dh).noalias() = ds.transpose() * c.q.middleCols(off, dh);
    }
    Matrix dxq = linear_backward(dq, c.xq, w.wq, w.bq);
    Matrix dxkv = linear_backward(dk, c.xkv, w.wk, w.bk);
    dxkv += linear_backward(dv, c.xkv, w.wv, w.bv);
    return {std::move(dxq), std::move(dxkv)};
}

struct FfnWeights {
    Slot w1, b1, w2, b2;
};

struct FfnCache {
    Matrix x, pre, act;
};

Matrix feed_forward(const FfnWeights& w, const Matrix& x, FfnCache& c) {
    c.x = x;
    c.pre = linear(x, w.w1, w.b1);
    c.act = c.pre.unaryExpr([](double v) { return gelu(v); });
    return linear(c.act, w.w2, w.b2);
}

Matrix feed_forward_backward(const Matrix& dy, const FfnWeights& w, const FfnCache& c) {
    Matrix dact = linear_backward(dy, c.act, w.w2, w.b2);
    Matrix dpre = dact.array() * c.pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    return linear_backward(dpre, c.x, w.w1, w.b1);
}

struct AdapterWeights {
    FfnWeights bottleneck;  // w1 = down, w2 = up
    Slot ln_g, ln_b;
};

struct AdapterCache {
    FfnCache ffn;
    LayerNormCache ln;
};

/// x + LayerNorm(up(gelu(down(x)))): the norm sits on the bottleneck branch,
/// before the residual add.
Matrix adapter(const AdapterWeights& w, const Matrix& x, AdapterCache& c) {
    Matrix u = feed_forward(w.bottleneck, x, c.ffn);
    return x + layer_norm(u, w.ln_g, w.ln_b, c.ln);
}

Matrix adapter_backward(const Matrix& dy, const AdapterWeights& w, const AdapterCache& c) {
    Matrix du = layer_norm_backward(dy, w.ln_g, w.ln_b, c.ln);
    return dy + feed_forward_backward(du, w.bottleneck, c.ffn);
}

// ---------------------------------------------------------------------------
// Layers

struct EncoderLayerWeights {
    Slot ln1_g, ln1_b, ln2_g, ln2_b;
    AttentionWeights self;
    FfnWeights ffn;
    std::optional<AdapterWeights> adapter;
};

struct DecoderLayerWeights {
    Slot ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    AttentionWeights self, cross;
    FfnWeights ffn;
    std::optional<AdapterWeights> adapter;
};

FfnWeights bind_ffn(const Binder& bind, const std::string& p) {
    return {bind(p + ".w1"), bind(p + ".b1"), bind(p + ".w2"), bind(p + ".b2")};
}

std::optional<AdapterWeights> bind_adapter(const Binder& bind, const std::string& layer) {
    const std::string p = layer + ".adapter";
    if (!bind.has(p + ".down")) {
        return std::nullopt;
    }
    return AdapterWeights{{bind(p + ".down"), bind(p + ".down_b"), bind(p + ".up"), bind(p + ".up_b")},
                          bind(p + ".ln.g"),
                          bind(p + ".ln.b")};
}

struct EncoderLayerCache {
    LayerNormCache ln1, ln2;
    AttentionCache self;
    FfnCache ffn;
    AdapterCache adapter;
};

struct DecoderLayerCache {
    LayerNormCache ln1, ln2, ln3;
    AttentionCache self, cross;
    FfnCache ffn;
    AdapterCache adapter;
};

const Matrix& positional_table(std::size_t length, std::size_t dim) {
    thread_local std::unordered_map<std::size_t, Matrix> tables;
    Matrix& t = tables[dim];
    if (static_cast<std::size_t>(t.rows()) < length) {
        const std::size_t rows = std::max<std::size_t>(length, 64);
        t.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(dim));
        for (std::size_t pos = 0; pos < rows; ++pos) {
            for (std::size_t i = 0; i < dim; ++i) {
                const double rate = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(dim));
                const double angle = static_cast<double>(pos) * rate;
                t(static_cast<Eigen::Index>(pos), static_cast<Eigen::Index>(i)) =
                    i % 2 == 0 ? std::sin(angle) : std::cos(angle);
            }
        }
    }
    return t;
}

/// Whole-network forward/backward over one (encoder, decoder) pair.
class Network {
public:
    Network(const ModelParams& params, Gradients* grads) : cfg_(params.config()), bind_(params, grads) {
        enc_embed_ = bind_("enc.embed");
        dec_embed_ = bind_("dec.embed");
        out_proj_ = bind_("out.proj");
        out_bias_ = bind_("out.bias");
        enc_final_g_ = bind_("enc.final.g");
        enc_final_b_ = bind_("enc.final.b");
        dec_final_g_ = bind_("dec.final.g");
        dec_final_b_ = bind_("dec.final.b");
        for (std::size_t i = 0; i < cfg_.encoder_layers; ++i) {
            const std::string p = "enc." + std::to_string(i);
            enc_layers_.push_back({bind_(p + ".ln1.g"), bind_(p + ".ln1.b"), bind_(p + ".ln2.g"), bind_(p + ".ln2.b"),
                                   bind_attention(bind_, p + ".self"), bind_ffn(bind_, p + ".ffn"),
                                   bind_adapter(bind_, p)});
        }
        for (std::size_t i = 0; i < cfg_.decoder_layers; ++i) {
            const std::string p = "dec." + std::to_string(i);
            dec_layers_.push_back({bind_(p + ".ln1.g"), bind_(p + ".ln1.b"), bind_(p + ".ln2.g"), bind_(p + ".ln2.b"),
                                   bind_(p + ".ln3.g"), bind_(p + ".ln3.b"), bind_attention(bind_, p + ".self"),
                                   bind_attention(bind_, p + ".cross"), bind_ffn(bind_, p + ".ffn"),
                                   bind_adapter(bind_, p)});
        }
    }

    void check_ids(std::span<const TokenId> ids, const char* what) const {
        if (ids.empty()) {
            throw ValidationError(std::string(what) + " sequence is empty");
        }
        if (ids.size() > cfg_.max_input) {
            throw ValidationError(std::string(what) + " sequence of length " + std::to_string(ids.size()) +
                                  " exceeds max_input " + std::to_string(cfg_.max_input));
        }
        for (TokenId id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size) {
                throw ValidationError("token id " + std::to_string(id) + " outside vocabulary of size " +
                                      std::to_string(cfg_.vocab_size));
            }
        }
    }

    Matrix embed(std::span<const TokenId> ids, const Slot& table) const {
        const auto d = static_cast<Eigen::Index>(cfg_.model_dim);
        const double scale = std::sqrt(static_cast<double>(cfg_.model_dim));
        const Matrix& pe = positional_table(ids.size(), cfg_.model_dim);
        Matrix x(static_cast<Eigen::Index>(ids.size()), d);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            x.row(r) = table.w().row(ids[i]) * scale + pe.row(r);
        }
        return x;
    }

    void embed_backward(const Matrix& dx, std::span<const TokenId> ids, const Slot& table) const {
        if (!table.grad) {
            return;
        }
        const double scale = std::sqrt(static_cast<double>(cfg_.model_dim));
        for (std::size_t i = 0; i < ids.size(); ++i) {
            table.grad->row(ids[i]) += dx.row(static_cast<Eigen::Index>(i)) * scale;
        }
    }

    Matrix encode(std::span<const TokenId> ids) {
        enc_ids_ = ids;
        Matrix x = embed(ids, enc_embed_);
        enc_cache_.resize(enc_layers_.size());
        for (std::size_t l = 0; l < enc_layers_.size(); ++l) {
            const auto& w = enc_layers_[l];
            auto& c = enc_cache_[l];
            Matrix h = layer_norm(x, w.ln1_g, w.ln1_b, c.ln1);
            x += attention(w.self, h, h, false, cfg_.heads, c.self);
            h = layer_norm(x, w.ln2_g, w.ln2_b, c.ln2);
            x += feed_forward(w.ffn, h, c.ffn);
            if (w.adapter) {
                x = adapter(*w.adapter, x, c.adapter);
            }
        }
        enc_out_ = layer_norm(x, enc_final_g_, enc_final_b_, enc_final_);
        return enc_out_;
    }

    /// Logits for every decoder position given the cached encoder output.
    Matrix decode(std::span<const TokenId> ids) {
        dec_ids_ = ids;
        Matrix y = embed(ids, dec_embed_);
        dec_cache_.resize(dec_layers_.size());
        for (std::size_t l = 0; l < dec_layers_.size(); ++l) {
            const auto& w = dec_layers_[l];
            auto& c = dec_cache_[l];
            Matrix h = layer_norm(y, w.ln1_g, w.ln1_b, c.ln1);
            y += attention(w.self, h, h, true, cfg_.heads, c.self);
            h = layer_norm(y, w.ln2_g, w.ln2_b, c.ln2);
            y += attention(w.cross, h, enc_out_, false, cfg_.heads, c.cross);
            h = layer_norm(y, w.ln3_g, w.ln3_b, c.ln3);
            y += feed_forward(w.ffn, h, c.ffn);
            if (w.adapter) {
                y = adapter(*w.adapter, y, c.adapter);
            }
        }
        dec_final_out_ = layer_norm(y, dec_final_g_, dec_final_b_, dec_final_);
        return linear(dec_final_out_, out_proj_, out_bias_);
    }

    void backward(const Matrix& dlogits) {
        Matrix dy = linear_backward(dlogits, dec_final_out_, out_proj_, out_bias_);
        dy = layer_norm_backward(dy, dec_final_g_, dec_final_b_, dec_final_);
        Matrix denc = Matrix::Zero(enc_out_.rows(), enc_out_.cols());
        for (std::size_t l = dec_layers_.size(); l-- > 0;) {
            const auto& w = dec_layers_[l];
            const auto& c = dec_cache_[l];
            if (w.adapter) {
                dy = adapter_backward(dy, *w.adapter, c.adapter);
            }
            dy += layer_norm_backward(feed_forward_backward(dy, w.ffn, c.ffn), w.ln3_g, w.ln3_b, c.ln3);
            auto [dq, dkv] = attention_backward(dy, w.cross, cfg_.heads, c.cross);
            denc += dkv;
            dy += layer_norm_backward(dq, w.ln2_g, w.ln2_b, c.ln2);
            auto [sq, skv] = attention_backward(dy, w.self, cfg_.heads, c.self);
            sq += skv;
            dy += layer_norm_backward(sq, w.ln1_g, w.ln1_b, c.ln1);
        }
        embed_backward(dy, dec_ids_, dec_embed_);

        Matrix dx = layer_norm_backward(denc, enc_final_g_, enc_final_b_, enc_final_);
        for (std::size_t l = enc_layers_.size(); l-- > 0;) {
            const auto& w = enc_layers_[l];
            const auto& c = enc_cache_[l];
            if (w.adapter) {
                dx = adapter_backward(dx, *w.adapter, c.adapter);
            }
            dx += layer_norm_backward(feed_forward_backward(dx, w.ffn, c.ffn), w.ln2_g, w.ln2_b, c.ln2);
            auto [sq, skv] = attention_backward(dx, w.self, cfg_.heads, c.self);
            sq += skv;
            dx += layer_norm_backward(sq, w.ln1_g, w.ln1_b, c.ln1);
        }
        embed_backward(dx, enc_ids_, enc_embed_);
    }

private:
    const ModelConfig& cfg_;
    Binder bind_;
    Slot enc_embed_, dec_embed_, out_proj_, out_bias_, enc_final_g_, enc_final_b_, dec_final_g_, dec_final_b_;
    std::vector<EncoderLayerWeights> enc_layers_;
    std::vector<DecoderLayerWeights> dec_layers_;

    std::span<const TokenId> enc_ids_, dec_ids_;
    std::vector<EncoderLayerCache> enc_cache_;
    std::vector<DecoderLayerCache> dec_cache_;
    LayerNormCache enc_final_, dec_final_;
    Matrix enc_out_, dec_final_out_;
};

Matrix log_softmax_rows(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
        out.row(i) = logits.row(i).array() - lse;
    }
    return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration and parameters

void validate(const ModelConfig& config) {
    if (config.model_dim == 0 || config.heads == 0 || config.ffn_dim == 0) {
        throw ValidationError("model_dim, heads and ffn_dim must be positive");
    }
    if (config.model_dim % config.heads != 0) {
        throw ValidationError("model_dim " + std::to_string(config.model_dim) + " is not divisible by heads " +
                              std::to_string(config.heads));
    }
    if (config.vocab_size <= static_cast<std::size_t>(kEos)) {
        throw ValidationError("vocab_size must include the reserved tokens");
    }
    if (config.max_input < 2) {
        throw ValidationError("max_input must be at least 2");
    }
    if (config.share_embeddings) {
        throw ValidationError("shared embeddings are not supported; encoder, decoder and output matrices are distinct");
    }
}

std::vector<std::size_t> adapter_encoder_layers(std::size_t encoder_layers) {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < encoder_layers; i += 2) {
        out.push_back(i);
    }
    return out;
}

ModelParams::ModelParams(ModelConfig config, std::optional<AdapterConfig> adapters, std::vector<ParamArray> arrays)
    : config_(config), adapters_(adapters) {
    for (auto& a : arrays) {
        add(std::move(a));
    }
}

std::size_t ModelParams::index_of(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ValidationError("model has no array named '" + name + "'");
    }
    return it->second;
}

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& a : arrays_) {
        n += static_cast<std::size_t>(a.value.size());
    }
    return n;
}

void ModelParams::add(ParamArray array) {
    if (!index_.emplace(array.name, arrays_.size()).second) {
        throw ValidationError("duplicate array name '" + array.name + "'");
    }
    arrays_.push_back(std::move(array));
}

Gradients zero_gradients(const ModelParams& params) {
    Gradients g;
    g.reserve(params.arrays().size());
    for (const auto& a : params.arrays()) {
        g.push_back(Matrix::Zero(a.value.rows(), a.value.cols()));
    }
    return g;
}

namespace {

class Initializer {
public:
    Initializer(ModelParams& params, std::uint64_t seed, bool adapter) : params_(params), rng_(seed), adapter_(adapter) {}

    void normal(const std::string& name, std::size_t rows, std::size_t cols, double stddev) {
        Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        for (Eigen::Index i = 0; i < m.rows(); ++i) {
            for (Eigen::Index j = 0; j < m.cols(); ++j) {
                m(i, j) = rng_.normal() * stddev;
            }
        }
        params_.add({name, std::move(m), true, adapter_});
    }

    void constant(const std::string& name, std::size_t rows, std::size_t cols, double v) {
        params_.add({name, Matrix::Constant(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), v), true,
                     adapter_});
    }

    void linear(const std::string& w, const std::string& b, std::size_t out, std::size_t in) {
        normal(w, out, in, 1.0 / std::sqrt(static_cast<double>(in)));
        constant(b, 1, out, 0.0);
    }

    void norm(const std::string& p) {
        constant(p + ".g", 1, dim(), 1.0);
        constant(p + ".b", 1, dim(), 0.0);
    }

    void attention(const std::string& p) {
        for (const char* n : {"q", "k", "v", "o"}) {
            linear(p + ".w" + n, p + ".b" + n, dim(), dim());
        }
    }

    std::size_t dim() const { return params_.config().model_dim; }

private:
    ModelParams& params_;
    Rng rng_;
    bool adapter_;
};

}  // namespace

ModelParams init_model(const ModelConfig& config, std::uint64_t seed) {
    validate(config);
    ModelParams params(config, std::nullopt, {});
    Initializer init(params, seed, false);
    const std::size_t d = config.model_dim;
    const std::size_t v = config.vocab_size;
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    init.normal("enc.embed", v, d, emb_std);
    init.normal("dec.embed", v, d, emb_std);
    for (std::size_t i = 0; i < config.encoder_layers; ++i) {
        const std::string p = "enc." + std::to_string(i);
        init.norm(p + ".ln1");
        init.attention(p + ".self");
        init.norm(p + ".ln2");
        init.linear(p + ".ffn.w1", p + ".ffn.b1", config.ffn_dim, d);
        init.linear(p + ".ffn.w2", p + ".ffn.b2", d, config.ffn_dim);
    }
    init.norm("enc.final");
    for (std::size_t i = 0; i < config.decoder_layers; ++i) {
        const std::string p = "dec." + std::to_string(i);
        init.norm(p + ".ln1");
        init.attention(p + ".self");
        init.norm(p + ".ln2");
        init.attention(p + ".cross");
        init.norm(p + ".ln3");
        init.linear(p + ".ffn.w1", p + ".ffn.b1", config.ffn_dim, d);
        init.linear(p + ".ffn.w2", p + ".ffn.b2", d, config.ffn_dim);
    }
    init.norm("dec.final");
    init.normal("out.proj", v, d, emb_std);
    init.constant("out.bias", 1, v, 0.0);
    return params;
}

ModelParams inject_adapters(ModelParams params, const AdapterConfig& adapters, std::uint64_t seed) {
    if (params.has_adapters()) {
        throw StateError("adapters are already injected");
    }
    if (adapters.bottleneck == 0) {
        throw ValidationError("adapter bottleneck must be positive");
    }
    for (auto& a : params.arrays()) {
        a.trainable = false;
    }
    const auto& config = params.config();
    const std::size_t d = config.model_dim;
    const std::size_t b = adapters.bottleneck;
    Initializer init(params, seed, true);
    auto add = [&](const std::string& layer) {
        const std::string p = layer + ".adapter";
        init.normal(p + ".down", b, d, 1.0 / std::sqrt(static_cast<double>(d)));
        init.constant(p + ".down_b", 1, b, 0.0);
        init.constant(p + ".up", d, b, 0.0);
        init.constant(p + ".up_b", 1, d, 0.0);
        init.norm(p + ".ln");
    };
    for (std::size_t i : adapter_encoder_layers(config.encoder_layers)) {
        add("enc." + std::to_string(i));
    }
    for (std::size_t i = 0; i < config.decoder_layers; ++i) {
        add("dec." + std::to_string(i));
    }
    params.set_adapters(adapters);
    return params;
}

// ---------------------------------------------------------------------------
// Inference and training passes

Matrix forward(const ModelParams& params, std::span<const TokenId> encoder_ids, std::span<const TokenId> decoder_ids) {
    Network net(params, nullptr);
    net.check_ids(encoder_ids, "encoder");
    net.check_ids(decoder_ids, "decoder");
    net.encode(encoder_ids);
    return log_softmax_rows(net.decode(decoder_ids));
}

LossStats loss_and_gradients(const ModelParams& params, std::span<const TokenId> encoder_ids,
                             std::span<const TokenId> decoder_ids, std::span<const std::uint8_t> loss_mask,
                             Gradients& grads, double scale) {
    if (decoder_ids.size() < 2) {
        throw ValidationError("decoder sequence needs at least two tokens for teacher forcing");
    }
    if (loss_mask.size() != decoder_ids.size() - 1) {
        throw ValidationError("loss mask length " + std::to_string(loss_mask.size()) +
                              " does not match the number of predicted positions " +
                              std::to_string(decoder_ids.size() - 1));
    }
    if (grads.size() != params.arrays().size()) {
        throw ValidationError("gradient buffers do not match the model arrays");
    }
    Network net(params, &grads);
    net.check_ids(encoder_ids, "encoder");
    net.check_ids(decoder_ids, "decoder");
    net.encode(encoder_ids);
    auto inputs = decoder_ids.first(decoder_ids.size() - 1);
    Matrix logits = net.decode(inputs);
    Matrix logp = log_softmax_rows(logits);

    LossStats stats;
    Matrix dlogits = Matrix::Zero(logits.rows(), logits.cols());
    for (Eigen::Index j = 0; j < logits.rows(); ++j) {
        if (!loss_mask[static_cast<std::size_t>(j)]) {
            continue;
        }
        const TokenId target = decoder_ids[static_cast<std::size_t>(j) + 1];
        stats.nll_sum -= logp(j, target);
        ++stats.count;
        dlogits.row(j) = logp.row(j).array().exp() * scale;
        dlogits(j, target) -= scale;
    }
    if (stats.count > 0) {
        net.backward(dlogits);
    }
    return stats;
}

TokenIds DecodeResult::text_ids() const {
    TokenIds out;
    for (TokenId id : generated_ids) {
        if (!is_reserved(id)) {
            out.push_back(id);
        }
    }
    return out;
}

DecodeResult greedy_decode(const ModelParams& params, std::span<const TokenId> encoder_ids,
                           std::span<const TokenId> decoder_prefix, std::size_t max_new) {
    if (max_new == 0) {
        throw ValidationError("max_new must be positive");
    }
    if (decoder_prefix.empty() || decoder_prefix.front() != kBos) {
        throw ValidationError("decoder prefix must begin with <bos>");
    }
    Network net(params, nullptr);
    net.check_ids(encoder_ids, "encoder");
    net.check_ids(decoder_prefix, "decoder prefix");
    net.encode(encoder_ids);
    TokenIds seq(decoder_prefix.begin(), decoder_prefix.end());
    DecodeResult result;
    for (std::size_t step = 0; step < max_new && seq.size() < params.config().max_input; ++step) {
        Matrix logits = net.decode(seq);
        const auto last = logits.row(logits.rows() - 1);
        Eigen::Index best = 0;
        for (Eigen::Index v = 1; v < last.size(); ++v) {
            if (last(v) > last(best)) {
                best = v;
            }
        }
        const auto tok = static_cast<TokenId>(best);
        if (tok == kEos) {
            break;
        }
        result.generated_ids.push_back(tok);
        seq.push_back(tok);
    }
    result.is_empty = result.generated_ids.empty();
    return result;
}

// ---------------------------------------------------------------------------
// Serialization

std::string hash_arrays(const ModelParams& params, bool adapters_only, bool base_only) {
    std::uint64_t h = kFnvOffset;
    for (const auto& a : params.arrays()) {
        if ((adapters_only && !a.adapter) || (base_only && a.adapter)) {
            continue;
        }
        h = fnv1a(a.name, h);
        h = fnv1a(std::as_bytes(std::span<const double>(a.value.data(), static_cast<std::size_t>(a.value.size()))), h);
    }
    return hex64(h);
}

nlohmann::json to_json(const ModelConfig& c) {
    return {{"encoder_layers", c.encoder_layers}, {"decoder_layers", c.decoder_layers},
            {"model_dim", c.model_dim},           {"ffn_dim", c.ffn_dim},
            {"heads", c.heads},                   {"max_input", c.max_input},
            {"vocab_size", c.vocab_size},         {"share_embeddings", c.share_embeddings}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.encoder_layers = j.value("encoder_layers", c.encoder_layers);
    c.decoder_layers = j.value("decoder_layers", c.decoder_layers);
    c.model_dim = j.value("model_dim", c.model_dim);
    c.ffn_dim = j.value("ffn_dim", c.ffn_dim);
    c.heads = j.value("heads", c.heads);
    c.max_input = j.value("max_input", c.max_input);
    c.vocab_size = j.value("vocab_size", c.vocab_size);
    c.share_embeddings = j.value("share_embeddings", c.share_embeddings);
    return c;
}

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
    nlohmann::json header = {
        {"config", to_json(params.config())},
        {"adapters", params.has_adapters() ? nlohmann::json{{"bottleneck", params.adapters()->bottleneck},
                                                            {"encoder_layers",
                                                             adapter_encoder_layers(params.config().encoder_layers)},
                                                            {"decoder_layers", "all"},
                                                            {"norm", "after-bottleneck, inside branch, before residual add"},
                                                            {"up_init", "zero"}}
                                           : nlohmann::json(nullptr)},
        {"activation", "gelu"},
        {"positional_encoding", "sinusoidal"},
        {"layer_norm", "pre"},
        {"reference_scale", {{"encoder_layers", 12}, {"decoder_layers", 2}, {"model_dim", 1024}, {"ffn_dim", 4096},
                             {"vocab_size", 32768}, {"max_input", 1536}, {"adapter_bottleneck", 256}}}};
    const std::string header_text = header.dump();

    std::ostringstream os(std::ios::binary);
    os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
    write_u32(os, kCheckpointVersion);
    write_u64(os, header_text.size());
    os.write(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    write_u64(os, params.arrays().size());
    for (const auto& a : params.arrays()) {
        write_u32(os, static_cast<std::uint32_t>(a.name.size()));
        os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
        write_u32(os, static_cast<std::uint32_t>(a.value.rows()));
        write_u32(os, static_cast<std::uint32_t>(a.value.cols()));
        write_u8(os, a.trainable ? 1 : 0);
        write_u8(os, a.adapter ? 1 : 0);
        for (Eigen::Index i = 0; i < a.value.rows(); ++i) {
            for (Eigen::Index j = 0; j < a.value.cols(); ++j) {
                write_f32(os, static_cast<float>(a.value(i, j)));
            }
        }
    }
    write_file_atomic(path, os.str());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DependencyError("cannot open checkpoint " + path.string());
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + 8, kCheckpointMagic)) {
        throw ValidationError("not a checkpoint: " + path.string());
    }
    if (read_u32(in) != kCheckpointVersion) {
        throw ValidationError("unsupported checkpoint version");
    }
    std::string header_text(read_u64(in), '\0');
    in.read(header_text.data(), static_cast<std::streamsize>(header_text.size()));
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("checkpoint header: ") + e.what());
    }
    ModelConfig config = model_config_from_json(header.at("config"));
    validate(config);
    std::optional<AdapterConfig> adapters;
    if (!header.at("adapters").is_null()) {
        adapters = AdapterConfig{header["adapters"].at("bottleneck").get<std::size_t>()};
    }
    ModelParams params(config, adapters, {});
    const std::uint64_t count = read_u64(in);
    for (std::uint64_t k = 0; k < count; ++k) {
        std::string name(read_u32(in), '\0');
        in.read(name.data(), static_cast<std::streamsize>(name.size()));
        const auto rows = static_cast<Eigen::Index>(read_u32(in));
        const auto cols = static_cast<Eigen::Index>(read_u32(in));
        const bool trainable = read_u8(in) != 0;
        const bool adapter = read_u8(in) != 0;
        Matrix m(rows, cols);
        for (Eigen::Index i = 0; i < rows; ++i) {
            for (Eigen::Index j = 0; j < cols; ++j) {
                m(i, j) = read_f32(in);
            }
        }
        params.add({std::move(name), std::move(m), trainable, adapter});
    }
    return params;
}

}  // namespace iclmt
