#include "conceptlm/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "conceptlm/rng.hpp"
#include "conceptlm/vocab.hpp"

namespace conceptlm {

using json = nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "checkpoint layout assumes a little-endian host");

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw ConfigurationError("model config: " + msg); };
    if (d_model <= 0) fail("d_model must be positive");
    if (n_heads <= 0) fail("n_heads must be positive");
    if (d_model % n_heads != 0) fail("d_model must be divisible by n_heads");
    if (n_enc_layers <= 0) fail("n_enc_layers must be positive");
    if (n_dec_layers <= 0) fail("n_dec_layers must be positive");
    if (d_ffn <= 0) fail("d_ffn must be positive");
    if (max_seq_len < 2) fail("max_seq_len must be at least 2");
    // Hand-built tiny vocabularies are legitimate here; the pipeline layer
    // guarantees the full reserved block when building from a real corpus.
    if (vocab_size < 4) fail("vocab_size must cover pad, bos, eos and unk");
    if (dropout_rate < 0.0 || dropout_rate >= 1.0) fail("dropout_rate must be in [0, 1)");
}

namespace {

int read_int(const json& j, const char* key) {
    if (!j.contains(key)) throw ConfigurationError(std::string("model config: missing ") + key);
    if (!j.at(key).is_number_integer())
        throw ConfigurationError(std::string("model config: ") + key + " must be an integer");
    return j.at(key).get<int>();
}

json config_json(const ModelConfig& c) {
    return {{"d_model", c.d_model},         {"n_heads", c.n_heads},
            {"n_enc_layers", c.n_enc_layers}, {"n_dec_layers", c.n_dec_layers},
            {"d_ffn", c.d_ffn},             {"max_seq_len", c.max_seq_len},
            {"vocab_size", c.vocab_size},   {"dropout_rate", c.dropout_rate}};
}

ModelConfig config_from(const json& j) {
    ModelConfig c;
    c.d_model = read_int(j, "d_model");
    c.n_heads = read_int(j, "n_heads");
    c.n_enc_layers = read_int(j, "n_enc_layers");
    c.n_dec_layers = read_int(j, "n_dec_layers");
    c.d_ffn = read_int(j, "d_ffn");
    c.max_seq_len = read_int(j, "max_seq_len");
    c.vocab_size = read_int(j, "vocab_size");
    if (!j.contains("dropout_rate") || !j.at("dropout_rate").is_number())
        throw ConfigurationError("model config: missing dropout_rate");
    c.dropout_rate = j.at("dropout_rate").get<double>();
    return c;
}

}  // namespace

std::string config_to_json(const ModelConfig& cfg) { return config_json(cfg).dump(2); }

double softmax_nll(const std::vector<double>& logits, int gold) {
    if (logits.empty() || gold < 0 || gold >= static_cast<int>(logits.size()))
        throw std::invalid_argument("gold index outside logits");
    double mx = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (double v : logits) sum += std::exp(v - mx);
    return std::log(sum) + mx - logits[static_cast<size_t>(gold)];
}

ModelConfig config_from_json(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigurationError(std::string("model config: ") + e.what());
    }
    return config_from(j);
}

template <typename Real>
MatT<Real>& ParameterStoreT<Real>::at(const std::string& name) {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("unknown tensor: " + name);
    return it->second;
}

template <typename Real>
const MatT<Real>& ParameterStoreT<Real>::at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw std::out_of_range("unknown tensor: " + name);
    return it->second;
}

template <typename Real>
void ParameterStoreT<Real>::add_scaled(const ParameterStoreT& other, Real scale) {
    for (auto& [name, m] : tensors) m += other.at(name) * scale;
}

template <typename Real>
void ParameterStoreT<Real>::zero() {
    for (auto& [name, m] : tensors) m.setZero();
}

template <typename Real>
int64_t ParameterStoreT<Real>::parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, m] : tensors) n += m.size();
    return n;
}

namespace {

constexpr double kLnEps = 1e-5;

bool ends_with(const std::string& s, std::string_view suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
}

template <typename Real>
struct LNCacheT {
    MatT<Real> xhat;
    std::vector<Real> inv_std;
};

template <typename Real>
MatT<Real> ln_forward(const MatT<Real>& x, const MatT<Real>& g, const MatT<Real>& b,
                      LNCacheT<Real>& c) {
    const auto L = x.rows(), d = x.cols();
    c.xhat.resize(L, d);
    c.inv_std.resize(static_cast<size_t>(L));
    MatT<Real> y(L, d);
    for (Eigen::Index i = 0; i < L; ++i) {
        Real mu = x.row(i).mean();
        Real var = (x.row(i).array() - mu).square().sum() / static_cast<Real>(d);
        Real inv = Real(1) / std::sqrt(var + Real(kLnEps));
        c.inv_std[static_cast<size_t>(i)] = inv;
        c.xhat.row(i) = ((x.row(i).array() - mu) * inv).matrix();
        y.row(i) = c.xhat.row(i).cwiseProduct(g.row(0)) + b.row(0);
    }
    return y;
}

template <typename Real>
MatT<Real> ln_backward(const LNCacheT<Real>& c, const MatT<Real>& g, const MatT<Real>& dy,
                       MatT<Real>& dg, MatT<Real>& db) {
    const auto L = dy.rows(), d = dy.cols();
    MatT<Real> dx(L, d);
    for (Eigen::Index i = 0; i < L; ++i) {
        dg.row(0) += dy.row(i).cwiseProduct(c.xhat.row(i));
        db.row(0) += dy.row(i);
        MatT<Real> dxhat = dy.row(i).cwiseProduct(g.row(0));
        Real m1 = dxhat.mean();
        Real m2 = dxhat.cwiseProduct(c.xhat.row(i)).mean();
        dx.row(i) =
            ((dxhat.array() - m1 - c.xhat.row(i).array() * m2) * c.inv_std[static_cast<size_t>(i)])
                .matrix();
    }
    return dx;
}

template <typename Real>
struct AttnCacheT {
    MatT<Real> nq, nkv, q, k, v, m;
    std::vector<MatT<Real>> a;  // per-head softmax weights
};

template <typename Real>
MatT<Real> attn_forward(int n_heads, const MatT<Real>& nq, const MatT<Real>& nkv,
                        const MatT<Real>& wq, const MatT<Real>& wk, const MatT<Real>& wv,
                        const MatT<Real>& wo, bool causal, AttnCacheT<Real>& c) {
    const Eigen::Index d = wq.cols(), dh = d / n_heads;
    const Eigen::Index lq = nq.rows(), lk = nkv.rows();
    c.nq = nq;
    c.nkv = nkv;
    c.q = nq * wq;
    c.k = nkv * wk;
    c.v = nkv * wv;
    c.m.resize(lq, d);
    c.a.assign(static_cast<size_t>(n_heads), {});
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    const Real neg_inf = -std::numeric_limits<Real>::infinity();
    for (int h = 0; h < n_heads; ++h) {
        auto qh = c.q.middleCols(h * dh, dh);
        auto kh = c.k.middleCols(h * dh, dh);
        auto vh = c.v.middleCols(h * dh, dh);
        MatT<Real> s = qh * kh.transpose() * scale;
        if (causal)
            for (Eigen::Index i = 0; i < lq; ++i)
                for (Eigen::Index j = i + 1; j < lk; ++j) s(i, j) = neg_inf;
        for (Eigen::Index i = 0; i < lq; ++i) {
            Real mx = s.row(i).maxCoeff();
            Eigen::Array<Real, 1, Eigen::Dynamic> e = (s.row(i).array() - mx).exp();
            s.row(i) = (e / e.sum()).matrix();
        }
        c.a[static_cast<size_t>(h)] = std::move(s);
        c.m.middleCols(h * dh, dh) = c.a[static_cast<size_t>(h)] * vh;
    }
    return c.m * wo;
}

// dnq and dnkv are accumulated; for self-attention pass the same matrix twice.
template <typename Real>
void attn_backward(int n_heads, const AttnCacheT<Real>& c, const MatT<Real>& wq,
                   const MatT<Real>& wk, const MatT<Real>& wv, const MatT<Real>& wo,
                   const MatT<Real>& dout, MatT<Real>& dwq, MatT<Real>& dwk, MatT<Real>& dwv,
                   MatT<Real>& dwo, MatT<Real>& dnq, MatT<Real>& dnkv) {
    const Eigen::Index d = wq.cols(), dh = d / n_heads;
    const Eigen::Index lq = c.q.rows(), lk = c.k.rows();
    dwo += c.m.transpose() * dout;
    MatT<Real> dm = dout * wo.transpose();
    MatT<Real> dq(lq, d), dk(lk, d), dv(lk, d);
    const Real scale = Real(1) / std::sqrt(static_cast<Real>(dh));
    for (int h = 0; h < n_heads; ++h) {
        const MatT<Real>& a = c.a[static_cast<size_t>(h)];
        MatT<Real> dmh = dm.middleCols(h * dh, dh);
        dv.middleCols(h * dh, dh) = a.transpose() * dmh;
        MatT<Real> da = dmh * c.v.middleCols(h * dh, dh).transpose();
        MatT<Real> ds(lq, lk);
        for (Eigen::Index i = 0; i < lq; ++i) {
            Real dot = a.row(i).cwiseProduct(da.row(i)).sum();
            ds.row(i) = a.row(i).cwiseProduct((da.row(i).array() - dot).matrix());
        }
        ds *= scale;
        dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    dwq += c.nq.transpose() * dq;
    dwk += c.nkv.transpose() * dk;
    dwv += c.nkv.transpose() * dv;
    dnq += dq * wq.transpose();
    dnkv += dk * wk.transpose() + dv * wv.transpose();
}

template <typename Real>
struct FfnCacheT {
    MatT<Real> n, f1, r;
};

template <typename Real>
MatT<Real> ffn_forward(const MatT<Real>& n, const MatT<Real>& w1, const MatT<Real>& b1,
                       const MatT<Real>& w2, const MatT<Real>& b2, FfnCacheT<Real>& c) {
    c.n = n;
    c.f1 = n * w1;
    c.f1.rowwise() += b1.row(0);
    c.r = c.f1.cwiseMax(Real(0));
    MatT<Real> out = c.r * w2;
    out.rowwise() += b2.row(0);
    return out;
}

template <typename Real>
MatT<Real> ffn_backward(const FfnCacheT<Real>& c, const MatT<Real>& w1, const MatT<Real>& w2,
                        const MatT<Real>& dout, MatT<Real>& dw1, MatT<Real>& db1, MatT<Real>& dw2,
                        MatT<Real>& db2) {
    dw2 += c.r.transpose() * dout;
    db2.row(0) += dout.colwise().sum();
    MatT<Real> dr = dout * w2.transpose();
    MatT<Real> df1 =
        dr.cwiseProduct((c.f1.array() > Real(0)).template cast<Real>().matrix());
    dw1 += c.n.transpose() * df1;
    db1.row(0) += df1.colwise().sum();
    return df1 * w1.transpose();
}

template <typename Real>
MatT<Real> dropout_mask(Eigen::Index rows, Eigen::Index cols, double rate, SeededRng& rng) {
    MatT<Real> m(rows, cols);
    const Real inv_keep = Real(1.0 / (1.0 - rate));
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j)
            m(i, j) = rng.next_real() < rate ? Real(0) : inv_keep;
    return m;
}

template <typename Real>
MatT<Real> embed_rows(const MatT<Real>& embed, const MatT<Real>& pos, const std::vector<int>& ids) {
    MatT<Real> x(static_cast<Eigen::Index>(ids.size()), embed.cols());
    for (size_t t = 0; t < ids.size(); ++t)
        x.row(static_cast<Eigen::Index>(t)) =
            embed.row(ids[t]) + pos.row(static_cast<Eigen::Index>(t));
    return x;
}

template <typename Real>
struct EncLayerCacheT {
    LNCacheT<Real> ln1;
    AttnCacheT<Real> attn;
    MatT<Real> drop1;
    LNCacheT<Real> ln2;
    FfnCacheT<Real> ffn;
    MatT<Real> drop2;
};

template <typename Real>
struct DecLayerCacheT {
    LNCacheT<Real> ln1;
    AttnCacheT<Real> self_;
    MatT<Real> drop1;
    LNCacheT<Real> ln2;
    AttnCacheT<Real> cross;
    MatT<Real> drop2;
    LNCacheT<Real> ln3;
    FfnCacheT<Real> ffn;
    MatT<Real> drop3;
};

template <typename Real>
struct RowTraceT {
    std::vector<int> src, dec_in, gold;
    MatT<Real> enc_drop, dec_drop;
    std::vector<EncLayerCacheT<Real>> enc;
    LNCacheT<Real> enc_final;
    MatT<Real> henc;
    std::vector<DecLayerCacheT<Real>> dec;
    LNCacheT<Real> dec_final;
    MatT<Real> hdec;
    MatT<Real> p;  // output softmax rows
};

template <typename Real>
void check_ids(const std::vector<int>& ids, int vocab_size, const char* what) {
    for (int id : ids)
        if (id < 0 || id >= vocab_size)
            throw std::invalid_argument(std::string(what) + " id " + std::to_string(id) +
                                        " outside vocabulary of " + std::to_string(vocab_size));
}

template <typename Real>
MatT<Real> encode_row(const ModelConfig& cfg, const ParameterStoreT<Real>& P, RowTraceT<Real>& rt,
                      double rate, SeededRng* drng) {
    MatT<Real> x = embed_rows(P.at("embed"), P.at("enc.pos"), rt.src);
    if (drng) {
        rt.enc_drop = dropout_mask<Real>(x.rows(), x.cols(), rate, *drng);
        x = x.cwiseProduct(rt.enc_drop);
    }
    rt.enc.resize(static_cast<size_t>(cfg.n_enc_layers));
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
        auto& lc = rt.enc[static_cast<size_t>(l)];
        const std::string pre = "enc" + std::to_string(l);
        MatT<Real> n1 = ln_forward(x, P.at(pre + ".ln1.g"), P.at(pre + ".ln1.b"), lc.ln1);
        MatT<Real> ao = attn_forward(cfg.n_heads, n1, n1, P.at(pre + ".attn.wq"),
                                     P.at(pre + ".attn.wk"), P.at(pre + ".attn.wv"),
                                     P.at(pre + ".attn.wo"), false, lc.attn);
        if (drng) {
            lc.drop1 = dropout_mask<Real>(ao.rows(), ao.cols(), rate, *drng);
            ao = ao.cwiseProduct(lc.drop1);
        }
        x += ao;
        MatT<Real> n2 = ln_forward(x, P.at(pre + ".ln2.g"), P.at(pre + ".ln2.b"), lc.ln2);
        MatT<Real> fo = ffn_forward(n2, P.at(pre + ".ffn.w1"), P.at(pre + ".ffn.b1"),
                                    P.at(pre + ".ffn.w2"), P.at(pre + ".ffn.b2"), lc.ffn);
        if (drng) {
            lc.drop2 = dropout_mask<Real>(fo.rows(), fo.cols(), rate, *drng);
            fo = fo.cwiseProduct(lc.drop2);
        }
        x += fo;
    }
    rt.henc = ln_forward(x, P.at("enc.ln.g"), P.at("enc.ln.b"), rt.enc_final);
    return rt.henc;
}

template <typename Real>
MatT<Real> decode_row(const ModelConfig& cfg, const ParameterStoreT<Real>& P, RowTraceT<Real>& rt,
                      double rate, SeededRng* drng) {
    MatT<Real> y = embed_rows(P.at("embed"), P.at("dec.pos"), rt.dec_in);
    if (drng) {
        rt.dec_drop = dropout_mask<Real>(y.rows(), y.cols(), rate, *drng);
        y = y.cwiseProduct(rt.dec_drop);
    }
    rt.dec.resize(static_cast<size_t>(cfg.n_dec_layers));
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
        auto& lc = rt.dec[static_cast<size_t>(l)];
        const std::string pre = "dec" + std::to_string(l);
        MatT<Real> n1 = ln_forward(y, P.at(pre + ".ln1.g"), P.at(pre + ".ln1.b"), lc.ln1);
        MatT<Real> so = attn_forward(cfg.n_heads, n1, n1, P.at(pre + ".self.wq"),
                                     P.at(pre + ".self.wk"), P.at(pre + ".self.wv"),
                                     P.at(pre + ".self.wo"), true, lc.self_);
        if (drng) {
            lc.drop1 = dropout_mask<Real>(so.rows(), so.cols(), rate, *drng);
            so = so.cwiseProduct(lc.drop1);
        }
        y += so;
        MatT<Real> n2 = ln_forward(y, P.at(pre + ".ln2.g"), P.at(pre + ".ln2.b"), lc.ln2);
        MatT<Real> co = attn_forward(cfg.n_heads, n2, rt.henc, P.at(pre + ".cross.wq"),
                                     P.at(pre + ".cross.wk"), P.at(pre + ".cross.wv"),
                                     P.at(pre + ".cross.wo"), false, lc.cross);
        if (drng) {
            lc.drop2 = dropout_mask<Real>(co.rows(), co.cols(), rate, *drng);
            co = co.cwiseProduct(lc.drop2);
        }
        y += co;
        MatT<Real> n3 = ln_forward(y, P.at(pre + ".ln3.g"), P.at(pre + ".ln3.b"), lc.ln3);
        MatT<Real> fo = ffn_forward(n3, P.at(pre + ".ffn.w1"), P.at(pre + ".ffn.b1"),
                                    P.at(pre + ".ffn.w2"), P.at(pre + ".ffn.b2"), lc.ffn);
        if (drng) {
            lc.drop3 = dropout_mask<Real>(fo.rows(), fo.cols(), rate, *drng);
            fo = fo.cwiseProduct(lc.drop3);
        }
        y += fo;
    }
    rt.hdec = ln_forward(y, P.at("dec.ln.g"), P.at("dec.ln.b"), rt.dec_final);
    return rt.hdec;
}

// Fills rt.p and returns (nll sum, gold count) for the row.
template <typename Real>
std::pair<double, int64_t> output_loss(const ParameterStoreT<Real>& P, RowTraceT<Real>& rt) {
    const MatT<Real>& E = P.at("embed");
    MatT<Real> logits = rt.hdec * E.transpose();
    const auto T = logits.rows(), V = logits.cols();
    rt.p.resize(T, V);
    double nll = 0.0;
    int64_t count = 0;
    for (Eigen::Index t = 0; t < T; ++t) {
        Real mx = logits.row(t).maxCoeff();
        Eigen::Array<Real, 1, Eigen::Dynamic> e = (logits.row(t).array() - mx).exp();
        Real sum = e.sum();
        rt.p.row(t) = (e / sum).matrix();
        int gold = rt.gold[static_cast<size_t>(t)];
        if (gold == Vocabulary::kPad) continue;
        nll += std::log(static_cast<double>(sum)) + static_cast<double>(mx) -
               static_cast<double>(logits(t, gold));
        ++count;
    }
    return {nll, count};
}

template <typename Real>
ParameterStoreT<Real> zeros_like(const ParameterStoreT<Real>& P) {
    ParameterStoreT<Real> out;
    for (const auto& [name, m] : P.tensors)
        out.tensors[name] = MatT<Real>::Zero(m.rows(), m.cols());
    return out;
}

template <typename Real>
void backward_row(const ModelConfig& cfg, const ParameterStoreT<Real>& P, RowTraceT<Real>& rt,
                  double inv_count, ParameterStoreT<Real>& G) {
    const MatT<Real>& E = P.at("embed");
    MatT<Real>& dE = G.at("embed");
    MatT<Real> dlog = rt.p;
    for (Eigen::Index t = 0; t < dlog.rows(); ++t) {
        int gold = rt.gold[static_cast<size_t>(t)];
        if (gold == Vocabulary::kPad)
            dlog.row(t).setZero();
        else
            dlog(t, gold) -= Real(1);
    }
    dlog *= static_cast<Real>(inv_count);

    MatT<Real> dh = dlog * E;
    dE += dlog.transpose() * rt.hdec;

    MatT<Real> dy = ln_backward(rt.dec_final, P.at("dec.ln.g"), dh, G.at("dec.ln.g"),
                                G.at("dec.ln.b"));
    MatT<Real> dhenc = MatT<Real>::Zero(rt.henc.rows(), rt.henc.cols());
    for (int l = cfg.n_dec_layers - 1; l >= 0; --l) {
        auto& lc = rt.dec[static_cast<size_t>(l)];
        const std::string pre = "dec" + std::to_string(l);
        MatT<Real> dfo = lc.drop3.size() ? dy.cwiseProduct(lc.drop3).eval() : dy;
        MatT<Real> dn3 = ffn_backward(lc.ffn, P.at(pre + ".ffn.w1"), P.at(pre + ".ffn.w2"), dfo,
                                      G.at(pre + ".ffn.w1"), G.at(pre + ".ffn.b1"),
                                      G.at(pre + ".ffn.w2"), G.at(pre + ".ffn.b2"));
        dy += ln_backward(lc.ln3, P.at(pre + ".ln3.g"), dn3, G.at(pre + ".ln3.g"),
                          G.at(pre + ".ln3.b"));

        MatT<Real> dco = lc.drop2.size() ? dy.cwiseProduct(lc.drop2).eval() : dy;
        MatT<Real> dn2 = MatT<Real>::Zero(dy.rows(), dy.cols());
        attn_backward(cfg.n_heads, lc.cross, P.at(pre + ".cross.wq"), P.at(pre + ".cross.wk"),
                      P.at(pre + ".cross.wv"), P.at(pre + ".cross.wo"), dco,
                      G.at(pre + ".cross.wq"), G.at(pre + ".cross.wk"), G.at(pre + ".cross.wv"),
                      G.at(pre + ".cross.wo"), dn2, dhenc);
        dy += ln_backward(lc.ln2, P.at(pre + ".ln2.g"), dn2, G.at(pre + ".ln2.g"),
                          G.at(pre + ".ln2.b"));

        MatT<Real> dso = lc.drop1.size() ? dy.cwiseProduct(lc.drop1).eval() : dy;
        MatT<Real> dn1 = MatT<Real>::Zero(dy.rows(), dy.cols());
        attn_backward(cfg.n_heads, lc.self_, P.at(pre + ".self.wq"), P.at(pre + ".self.wk"),
                      P.at(pre + ".self.wv"), P.at(pre + ".self.wo"), dso, G.at(pre + ".self.wq"),
                      G.at(pre + ".self.wk"), G.at(pre + ".self.wv"), G.at(pre + ".self.wo"), dn1,
                      dn1);
        dy += ln_backward(lc.ln1, P.at(pre + ".ln1.g"), dn1, G.at(pre + ".ln1.g"),
                          G.at(pre + ".ln1.b"));
    }
    if (rt.dec_drop.size()) dy = dy.cwiseProduct(rt.dec_drop);
    MatT<Real>& dpd = G.at("dec.pos");
    for (size_t t = 0; t < rt.dec_in.size(); ++t) {
        dE.row(rt.dec_in[t]) += dy.row(static_cast<Eigen::Index>(t));
        dpd.row(static_cast<Eigen::Index>(t)) += dy.row(static_cast<Eigen::Index>(t));
    }

    MatT<Real> dx = ln_backward(rt.enc_final, P.at("enc.ln.g"), dhenc, G.at("enc.ln.g"),
                                G.at("enc.ln.b"));
    for (int l = cfg.n_enc_layers - 1; l >= 0; --l) {
        auto& lc = rt.enc[static_cast<size_t>(l)];
        const std::string pre = "enc" + std::to_string(l);
        MatT<Real> dfo = lc.drop2.size() ? dx.cwiseProduct(lc.drop2).eval() : dx;
        MatT<Real> dn2 = ffn_backward(lc.ffn, P.at(pre + ".ffn.w1"), P.at(pre + ".ffn.w2"), dfo,
                                      G.at(pre + ".ffn.w1"), G.at(pre + ".ffn.b1"),
                                      G.at(pre + ".ffn.w2"), G.at(pre + ".ffn.b2"));
        dx += ln_backward(lc.ln2, P.at(pre + ".ln2.g"), dn2, G.at(pre + ".ln2.g"),
                          G.at(pre + ".ln2.b"));

        MatT<Real> dao = lc.drop1.size() ? dx.cwiseProduct(lc.drop1).eval() : dx;
        MatT<Real> dn1 = MatT<Real>::Zero(dx.rows(), dx.cols());
        attn_backward(cfg.n_heads, lc.attn, P.at(pre + ".attn.wq"), P.at(pre + ".attn.wk"),
                      P.at(pre + ".attn.wv"), P.at(pre + ".attn.wo"), dao, G.at(pre + ".attn.wq"),
                      G.at(pre + ".attn.wk"), G.at(pre + ".attn.wv"), G.at(pre + ".attn.wo"), dn1,
                      dn1);
        dx += ln_backward(lc.ln1, P.at(pre + ".ln1.g"), dn1, G.at(pre + ".ln1.g"),
                          G.at(pre + ".ln1.b"));
    }
    if (rt.enc_drop.size()) dx = dx.cwiseProduct(rt.enc_drop);
    MatT<Real>& dpe = G.at("enc.pos");
    for (size_t s = 0; s < rt.src.size(); ++s) {
        dE.row(rt.src[s]) += dx.row(static_cast<Eigen::Index>(s));
        dpe.row(static_cast<Eigen::Index>(s)) += dx.row(static_cast<Eigen::Index>(s));
    }
}

}  // namespace

template <typename Real>
struct TraceImplT {
    bool consumed = false;
    double inv_count = 0.0;
    std::vector<RowTraceT<Real>> rows;
};

template <typename Real>
ForwardTraceT<Real>::ForwardTraceT() = default;
template <typename Real>
ForwardTraceT<Real>::~ForwardTraceT() = default;
template <typename Real>
ForwardTraceT<Real>::ForwardTraceT(ForwardTraceT&&) noexcept = default;
template <typename Real>
ForwardTraceT<Real>& ForwardTraceT<Real>::operator=(ForwardTraceT&&) noexcept = default;

template <typename Real>
bool ForwardTraceT<Real>::consumed() const {
    return impl == nullptr || impl->consumed;
}

namespace {

template <typename Real>
void scan_softmax(const MatT<Real>& rows, double& max_err, double& min_w, bool weights) {
    for (Eigen::Index i = 0; i < rows.rows(); ++i) {
        double sum = 0.0;
        for (Eigen::Index j = 0; j < rows.cols(); ++j) {
            double w = static_cast<double>(rows(i, j));
            sum += w;
            if (weights && w < min_w) min_w = w;
        }
        max_err = std::max(max_err, std::abs(sum - 1.0));
    }
}

template <typename Real>
void scan_row(const RowTraceT<Real>& rt, double& max_err, double& min_w) {
    for (const auto& lc : rt.enc)
        for (const auto& a : lc.attn.a) scan_softmax(a, max_err, min_w, true);
    for (const auto& lc : rt.dec) {
        for (const auto& a : lc.self_.a) scan_softmax(a, max_err, min_w, true);
        for (const auto& a : lc.cross.a) scan_softmax(a, max_err, min_w, true);
    }
    scan_softmax(rt.p, max_err, min_w, false);
}

}  // namespace

template <typename Real>
double ForwardTraceT<Real>::max_row_sum_error() const {
    if (consumed()) throw std::logic_error("forward trace already consumed");
    double max_err = 0.0, min_w = 1.0;
    for (const auto& rt : impl->rows) scan_row(rt, max_err, min_w);
    return max_err;
}

template <typename Real>
double ForwardTraceT<Real>::min_attention_weight() const {
    if (consumed()) throw std::logic_error("forward trace already consumed");
    double max_err = 0.0, min_w = 1.0;
    for (const auto& rt : impl->rows) scan_row(rt, max_err, min_w);
    return min_w;
}

template <typename Real>
ModelT<Real> ModelT<Real>::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    ModelT m;
    m.cfg = cfg;
    auto& t = m.params.tensors;
    const int d = cfg.d_model, F = cfg.d_ffn, V = cfg.vocab_size, L = cfg.max_seq_len;
    auto declare = [&](const std::string& name, int r, int c) {
        t[name] = MatT<Real>::Zero(r, c);
    };
    declare("embed", V, d);
    declare("enc.pos", L, d);
    declare("dec.pos", L, d);
    declare("enc.ln.g", 1, d);
    declare("enc.ln.b", 1, d);
    declare("dec.ln.g", 1, d);
    declare("dec.ln.b", 1, d);
    for (int l = 0; l < cfg.n_enc_layers; ++l) {
        const std::string pre = "enc" + std::to_string(l);
        for (const char* w : {".attn.wq", ".attn.wk", ".attn.wv", ".attn.wo"})
            declare(pre + w, d, d);
        for (const char* g : {".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b"}) declare(pre + g, 1, d);
        declare(pre + ".ffn.w1", d, F);
        declare(pre + ".ffn.b1", 1, F);
        declare(pre + ".ffn.w2", F, d);
        declare(pre + ".ffn.b2", 1, d);
    }
    for (int l = 0; l < cfg.n_dec_layers; ++l) {
        const std::string pre = "dec" + std::to_string(l);
        for (const char* w : {".self.wq", ".self.wk", ".self.wv", ".self.wo", ".cross.wq",
                              ".cross.wk", ".cross.wv", ".cross.wo"})
            declare(pre + w, d, d);
        for (const char* g : {".ln1.g", ".ln1.b", ".ln2.g", ".ln2.b", ".ln3.g", ".ln3.b"})
            declare(pre + g, 1, d);
        declare(pre + ".ffn.w1", d, F);
        declare(pre + ".ffn.b1", 1, F);
        declare(pre + ".ffn.w2", F, d);
        declare(pre + ".ffn.b2", 1, d);
    }
    // Per-tensor streams keyed by name: adding a tensor elsewhere never
    // shifts another tensor's values.
    for (auto& [name, mat] : t) {
        if (ends_with(name, ".g")) {
            mat.setOnes();
        } else if (ends_with(name, ".b") || ends_with(name, ".b1") || ends_with(name, ".b2")) {
            mat.setZero();
        } else {
            SeededRng rng(derive_seed(seed, name));
            for (Eigen::Index i = 0; i < mat.rows(); ++i)
                for (Eigen::Index j = 0; j < mat.cols(); ++j)
                    mat(i, j) = static_cast<Real>(rng.next_trunc_normal(0.02));
        }
    }
    return m;
}

template <typename Real>
double ModelT<Real>::forward_loss_rows(const std::vector<PackedRow>& rows,
                                       ForwardTraceT<Real>* trace,
                                       const DropoutSpec& dropout) const {
    auto impl = std::make_unique<TraceImplT<Real>>();
    impl->rows.resize(rows.size());
    const bool use_drop = dropout.rate > 0.0;
    SeededRng drng(dropout.seed);
    double nll_sum = 0.0;
    int64_t count = 0;
    for (size_t r = 0; r < rows.size(); ++r) {
        const PackedRow& row = rows[r];
        if (row.src.empty()) throw std::invalid_argument("empty source sequence");
        if (row.dec_in.size() != row.gold.size())
            throw std::invalid_argument("decoder input and gold lengths differ");
        if (static_cast<int>(row.src.size()) > cfg.max_seq_len ||
            static_cast<int>(row.dec_in.size()) > cfg.max_seq_len)
            throw std::invalid_argument("sequence longer than max_seq_len " +
                                        std::to_string(cfg.max_seq_len));
        check_ids<Real>(row.src, cfg.vocab_size, "source");
        check_ids<Real>(row.dec_in, cfg.vocab_size, "decoder");
        check_ids<Real>(row.gold, cfg.vocab_size, "gold");

        RowTraceT<Real>& rt = impl->rows[r];
        rt.src = row.src;
        rt.dec_in = row.dec_in;
        rt.gold = row.gold;
        encode_row(cfg, params, rt, dropout.rate, use_drop ? &drng : nullptr);
        decode_row(cfg, params, rt, dropout.rate, use_drop ? &drng : nullptr);
        auto [nll, n] = output_loss(params, rt);
        nll_sum += nll;
        count += n;
    }
    impl->inv_count = count > 0 ? 1.0 / static_cast<double>(count) : 0.0;
    double loss = count > 0 ? nll_sum / static_cast<double>(count) : 0.0;
    if (trace) trace->impl = std::move(impl);
    return loss;
}

template <typename Real>
double ModelT<Real>::forward_loss(const Batch& batch, ForwardTraceT<Real>* trace,
                                  const DropoutSpec& dropout) const {
    std::vector<PackedRow> rows;
    rows.reserve(batch.size());
    for (const Example& ex : batch) {
        PackedRow row;
        row.src = ex.src;
        row.dec_in.reserve(ex.tgt.size() + 1);
        row.dec_in.push_back(Vocabulary::kBos);
        row.dec_in.insert(row.dec_in.end(), ex.tgt.begin(), ex.tgt.end());
        row.gold = ex.tgt;
        row.gold.push_back(Vocabulary::kEos);
        rows.push_back(std::move(row));
    }
    return forward_loss_rows(rows, trace, dropout);
}

template <typename Real>
ParameterStoreT<Real> ModelT<Real>::backward(ForwardTraceT<Real>& trace) const {
    if (trace.consumed()) throw std::logic_error("forward trace already consumed");
    ParameterStoreT<Real> G = zeros_like(params);
    for (auto& rt : trace.impl->rows) backward_row(cfg, params, rt, trace.impl->inv_count, G);
    trace.impl.reset();
    return G;
}

template <typename Real>
std::vector<Real> ModelT<Real>::next_logits(const std::vector<int>& src,
                                            const std::vector<int>& prefix) const {
    RowTraceT<Real> rt;
    rt.src = src;
    rt.dec_in.push_back(Vocabulary::kBos);
    rt.dec_in.insert(rt.dec_in.end(), prefix.begin(), prefix.end());
    check_ids<Real>(rt.src, cfg.vocab_size, "source");
    check_ids<Real>(rt.dec_in, cfg.vocab_size, "decoder");
    if (rt.src.empty()) throw std::invalid_argument("empty source sequence");
    if (static_cast<int>(rt.src.size()) > cfg.max_seq_len ||
        static_cast<int>(rt.dec_in.size()) > cfg.max_seq_len)
        throw std::invalid_argument("sequence longer than max_seq_len " +
                                    std::to_string(cfg.max_seq_len));
    encode_row(cfg, params, rt, 0.0, nullptr);
    decode_row(cfg, params, rt, 0.0, nullptr);
    const MatT<Real>& E = params.at("embed");
    MatT<Real> logits = rt.hdec.bottomRows(1) * E.transpose();
    return std::vector<Real>(logits.data(), logits.data() + logits.cols());
}

template <typename Real>
MatT<Real> ModelT<Real>::forward_logits(const std::vector<int>& src,
                                        const std::vector<int>& tgt) const {
    RowTraceT<Real> rt;
    rt.src = src;
    rt.dec_in.push_back(Vocabulary::kBos);
    rt.dec_in.insert(rt.dec_in.end(), tgt.begin(), tgt.end());
    check_ids<Real>(rt.src, cfg.vocab_size, "source");
    check_ids<Real>(rt.dec_in, cfg.vocab_size, "decoder");
    if (rt.src.empty()) throw std::invalid_argument("empty source sequence");
    if (static_cast<int>(rt.src.size()) > cfg.max_seq_len ||
        static_cast<int>(rt.dec_in.size()) > cfg.max_seq_len)
        throw std::invalid_argument("sequence longer than max_seq_len " +
                                    std::to_string(cfg.max_seq_len));
    encode_row(cfg, params, rt, 0.0, nullptr);
    decode_row(cfg, params, rt, 0.0, nullptr);
    return rt.hdec * params.at("embed").transpose();
}

template <typename Real>
std::vector<int> ModelT<Real>::decode_greedy(const std::vector<int>& src, int max_len) const {
    if (src.empty()) throw std::invalid_argument("empty source sequence");
    check_ids<Real>(src, cfg.vocab_size, "source");
    if (static_cast<int>(src.size()) > cfg.max_seq_len)
        throw std::invalid_argument("sequence longer than max_seq_len " +
                                    std::to_string(cfg.max_seq_len));
    if (max_len < 0)
        max_len = static_cast<int>(std::ceil(1.2 * static_cast<double>(src.size())));
    max_len = std::min(max_len, cfg.max_seq_len - 1);

    RowTraceT<Real> rt;
    rt.src = src;
    encode_row(cfg, params, rt, 0.0, nullptr);
    const MatT<Real>& E = params.at("embed");
    std::vector<int> out;
    while (static_cast<int>(out.size()) < max_len) {
        rt.dec_in.assign(1, Vocabulary::kBos);
        rt.dec_in.insert(rt.dec_in.end(), out.begin(), out.end());
        decode_row(cfg, params, rt, 0.0, nullptr);
        MatT<Real> logits = rt.hdec.bottomRows(1) * E.transpose();
        int best = 0;
        for (Eigen::Index v = 1; v < logits.cols(); ++v)
            if (logits(0, v) > logits(0, best)) best = static_cast<int>(v);
        if (best == Vocabulary::kEos) break;
        out.push_back(best);
    }
    return out;
}

void save_checkpoint(const ParameterStoreT<float>& params, const ModelConfig& cfg,
                     const std::string& path) {
    json manifest;
    manifest["format_version"] = 1;
    manifest["config"] = config_json(cfg);
    json tensors = json::array();
    uint64_t offset = 0;
    for (const auto& [name, m] : params.tensors) {
        tensors.push_back({{"name", name},
                           {"rows", m.rows()},
                           {"cols", m.cols()},
                           {"offset", offset}});
        offset += static_cast<uint64_t>(m.size()) * sizeof(float);
    }
    manifest["tensors"] = std::move(tensors);
    const std::string mstr = manifest.dump();

    std::ofstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot write " + path);
    uint64_t len = mstr.size();
    f.write(reinterpret_cast<const char*>(&len), sizeof(len));
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& [name, m] : params.tensors)
        f.write(reinterpret_cast<const char*>(m.data()),
                static_cast<std::streamsize>(static_cast<uint64_t>(m.size()) * sizeof(float)));
    if (!f) throw CheckpointError("write failed: " + path);
}

std::pair<ParameterStoreT<float>, ModelConfig> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw CheckpointError("cannot open " + path);
    uint64_t len = 0;
    if (!f.read(reinterpret_cast<char*>(&len), sizeof(len)))
        throw CheckpointError("truncated header in " + path);
    std::string mstr(len, '\0');
    if (!f.read(mstr.data(), static_cast<std::streamsize>(len)))
        throw CheckpointError("truncated manifest in " + path);
    json manifest;
    try {
        manifest = json::parse(mstr);
    } catch (const json::exception& e) {
        throw CheckpointError("bad manifest in " + path + ": " + e.what());
    }
    if (manifest.value("format_version", 0) != 1)
        throw CheckpointError("unsupported format_version in " + path);
    ModelConfig cfg;
    try {
        cfg = config_from(manifest.at("config"));
    } catch (const json::exception& e) {
        throw CheckpointError("bad config in " + path + ": " + e.what());
    }
    std::string payload((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());

    ParameterStoreT<float> P;
    if (!manifest.contains("tensors") || !manifest.at("tensors").is_array())
        throw CheckpointError("bad manifest in " + path + ": missing tensors");
    for (const auto& entry : manifest.at("tensors")) {
        std::string name;
        uint64_t rows = 0, cols = 0, offset = 0;
        try {
            name = entry.at("name").get<std::string>();
            rows = entry.at("rows").get<uint64_t>();
            cols = entry.at("cols").get<uint64_t>();
            offset = entry.at("offset").get<uint64_t>();
        } catch (const json::exception& e) {
            throw CheckpointError("bad tensor entry in " + path + ": " + e.what());
        }
        const uint64_t bytes = rows * cols * sizeof(float);
        if (offset + bytes > payload.size())
            throw CheckpointError("truncated payload for tensor " + name + " in " + path);
        MatT<float> m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
        std::memcpy(m.data(), payload.data() + offset, bytes);
        if (!m.allFinite())
            throw CheckpointError("non-finite values in tensor " + name + " in " + path);
        P.tensors[name] = std::move(m);
    }
    cfg.validate();
    return {std::move(P), cfg};
}

std::pair<ParameterStoreT<float>, ModelConfig> load_checkpoint(const std::string& path,
                                                               const ModelConfig& want) {
    auto [P, got] = load_checkpoint(path);
    auto diff = [&](const char* field, auto a, auto b) {
        if (a != b)
            throw CheckpointError("checkpoint config mismatch at " + std::string(field) + ": " +
                                  path + " has " + std::to_string(a) + ", requested " +
                                  std::to_string(b));
    };
    diff("d_model", got.d_model, want.d_model);
    diff("n_heads", got.n_heads, want.n_heads);
    diff("n_enc_layers", got.n_enc_layers, want.n_enc_layers);
    diff("n_dec_layers", got.n_dec_layers, want.n_dec_layers);
    diff("d_ffn", got.d_ffn, want.d_ffn);
    diff("max_seq_len", got.max_seq_len, want.max_seq_len);
    diff("vocab_size", got.vocab_size, want.vocab_size);
    return {std::move(P), got};
}

template struct ParameterStoreT<float>;
template struct ParameterStoreT<double>;
template struct ForwardTraceT<float>;
template struct ForwardTraceT<double>;
template struct ModelT<float>;
template struct ModelT<double>;

}  // namespace conceptlm
