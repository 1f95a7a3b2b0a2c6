#pragma once

// Plain-loop transformer used as an independent oracle for the engine. It
// reads weights straight from the archive and shares no code with the engine
// beyond the config struct.

#include <cmath>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "medlab/engine.hpp"
#include "medlab/tensor_store.hpp"

namespace ref {

using Mat = std::vector<std::vector<double>>;

struct Splice {
  int layer, position, unit;
  double value;
};

struct AttnOverride {
  int layer, head;
  Mat probs;
};

struct Result {
  std::vector<Mat> layers;                // [n_layers + 1][seq][d]
  std::vector<std::vector<Mat>> attn;     // [layer][head][seq][seq]
  Mat final_hidden;                       // [seq][d]
  Mat logits;                             // [seq][vocab]
};

class Model {
 public:
  Model(medlab::engine::ModelConfig config, const medlab::store::TensorArchive& archive) : c_(std::move(config)) {
    for (const auto& e : archive.entries()) {
      std::vector<double> v(e.data.begin(), e.data.end());
      std::vector<std::size_t> dims(e.dims.begin(), e.dims.end());
      t_[e.name] = {std::move(dims), std::move(v)};
    }
  }

  Result forward(const std::vector<int>& ids, const std::vector<Splice>& splices = {},
                 const std::vector<AttnOverride>& overrides = {}) const {
    const std::size_t S = ids.size();
    const std::size_t d = static_cast<std::size_t>(c_.d_model);
    const std::size_t H = static_cast<std::size_t>(c_.n_heads);
    const std::size_t dh = d / H;
    const bool causal = c_.family == medlab::engine::Family::Causal;

    Result r;
    Mat x(S, std::vector<double>(d));
    for (std::size_t t = 0; t < S; ++t) {
      for (std::size_t u = 0; u < d; ++u) x[t][u] = w("tok_emb", ids[t], u) + w("pos_emb", t, u);
    }
    splice(x, 0, splices);
    r.layers.push_back(x);

    for (int b = 0; b < c_.n_layers; ++b) {
      const std::string p = "layer." + std::to_string(b) + ".";
      auto attention = [&](const Mat& h) {
        Mat q = linear(h, p + "attn.q"), k = linear(h, p + "attn.k"), v = linear(h, p + "attn.v");
        Mat ctx(S, std::vector<double>(d, 0.0));
        std::vector<Mat> heads;
        for (std::size_t hd = 0; hd < H; ++hd) {
          Mat probs(S, std::vector<double>(S, 0.0));
          const AttnOverride* ov = nullptr;
          for (const auto& o : overrides) {
            if (o.layer == b && o.head == static_cast<int>(hd)) ov = &o;
          }
          if (ov) {
            probs = ov->probs;
          } else {
            for (std::size_t i = 0; i < S; ++i) {
              const std::size_t width = causal ? i + 1 : S;
              std::vector<double> s(width);
              double mx = -INFINITY;
              for (std::size_t j = 0; j < width; ++j) {
                double dot = 0.0;
                for (std::size_t e = 0; e < dh; ++e) dot += q[i][hd * dh + e] * k[j][hd * dh + e];
                s[j] = dot / std::sqrt(static_cast<double>(dh));
                mx = std::max(mx, s[j]);
              }
              double z = 0.0;
              for (std::size_t j = 0; j < width; ++j) z += std::exp(s[j] - mx);
              for (std::size_t j = 0; j < width; ++j) probs[i][j] = std::exp(s[j] - mx) / z;
            }
          }
          for (std::size_t i = 0; i < S; ++i) {
            for (std::size_t j = 0; j < S; ++j) {
              for (std::size_t e = 0; e < dh; ++e) ctx[i][hd * dh + e] += probs[i][j] * v[j][hd * dh + e];
            }
          }
          heads.push_back(std::move(probs));
        }
        r.attn.push_back(std::move(heads));
        return linear(ctx, p + "attn.o");
      };
      auto mlp = [&](const Mat& h) {
        Mat a = linear(h, p + "mlp.fc_in");
        for (auto& row : a) {
          for (auto& v : row) {
            v = c_.activation == medlab::engine::Activation::Gelu
                    ? 0.5 * v * (1.0 + std::erf(v / std::sqrt(2.0)))
                    : 0.5 * v * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (v + 0.044715 * v * v * v)));
          }
        }
        return linear(a, p + "mlp.fc_out");
      };
      if (c_.norm_style == medlab::engine::NormStyle::Pre) {
        add(x, attention(norm(x, p + "ln1")));
        add(x, mlp(norm(x, p + "ln2")));
      } else {
        Mat a = attention(x);
        add(a, x);
        x = norm(a, p + "ln1");
        Mat m = mlp(x);
        add(m, x);
        x = norm(m, p + "ln2");
      }
      splice(x, b + 1, splices);
      r.layers.push_back(x);
    }

    r.final_hidden = norm(x, "ln_f");
    const std::string head = c_.tied_embeddings ? "tok_emb" : "lm_head.weight";
    const std::size_t V = static_cast<std::size_t>(c_.vocab_size);
    r.logits.assign(S, std::vector<double>(V, 0.0));
    for (std::size_t t = 0; t < S; ++t) {
      for (std::size_t v = 0; v < V; ++v) {
        double s = 0.0;
        for (std::size_t u = 0; u < d; ++u) s += r.final_hidden[t][u] * w(head, v, u);
        r.logits[t][v] = s;
      }
    }
    return r;
  }

 private:
  struct T {
    std::vector<std::size_t> dims;
    std::vector<double> v;
  };

  const T& get(const std::string& name) const {
    auto it = t_.find(name);
    if (it == t_.end()) throw std::runtime_error("reference: missing tensor " + name);
    return it->second;
  }
  double w(const std::string& name, std::size_t i, std::size_t j) const {
    const auto& t = get(name);
    return t.v[i * t.dims[1] + j];
  }
  double w1(const std::string& name, std::size_t i) const { return get(name).v[i]; }

  // y = x W^T + b with W stored [out, in]
  Mat linear(const Mat& x, const std::string& prefix) const {
    const auto& W = get(prefix + ".weight");
    const std::size_t out = W.dims[0], in = W.dims[1];
    Mat y(x.size(), std::vector<double>(out));
    for (std::size_t t = 0; t < x.size(); ++t) {
      for (std::size_t o = 0; o < out; ++o) {
        double s = w1(prefix + ".bias", o);
        for (std::size_t i = 0; i < in; ++i) s += x[t][i] * W.v[o * in + i];
        y[t][o] = s;
      }
    }
    return y;
  }

  Mat norm(const Mat& x, const std::string& prefix) const {
    Mat y = x;
    for (std::size_t t = 0; t < x.size(); ++t) {
      const double n = static_cast<double>(x[t].size());
      double mean = 0.0;
      for (double v : x[t]) mean += v;
      mean /= n;
      double var = 0.0;
      for (double v : x[t]) var += (v - mean) * (v - mean);
      var /= n;
      for (std::size_t u = 0; u < x[t].size(); ++u) {
        y[t][u] = (x[t][u] - mean) / std::sqrt(var + c_.ln_epsilon) * w1(prefix + ".gamma", u) + w1(prefix + ".beta", u);
      }
    }
    return y;
  }

  static void add(Mat& a, const Mat& b) {
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = 0; j < a[i].size(); ++j) a[i][j] += b[i][j];
    }
  }

  static void splice(Mat& x, int layer, const std::vector<Splice>& splices) {
    for (const auto& s : splices) {
      if (s.layer == layer) x[s.position][s.unit] = s.value;
    }
  }

  medlab::engine::ModelConfig c_;
  std::map<std::string, T> t_;
};

// log p(token) at each requested row, from logits via a two-pass log-sum-exp.
inline double log_prob(const std::vector<double>& logits, int token) {
  double mx = -INFINITY;
  for (double v : logits) mx = std::max(mx, v);
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return logits[static_cast<std::size_t>(token)] - mx - std::log(z);
}

}  // namespace ref
