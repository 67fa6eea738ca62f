#pragma once

// Independent reference implementations used only by tests. Everything here
// is deliberately written as plain nested loops over plain arrays so that it
// shares no code path with the library it checks.

#include <cmath>
#include <complex>
#include <vector>

namespace oracles {

// C[m x n] = A[m x k] B[k x n]
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b,
                                  int m, int k, int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p)
        c[static_cast<size_t>(i) * n + j] +=
            a[static_cast<size_t>(i) * k + p] * b[static_cast<size_t>(p) * n + j];
  return c;
}

// cross-correlation, 3x3 kernel, padding 1, same-size output
inline std::vector<double> conv2d(const std::vector<double>& x, const std::vector<double>& k,
                                  int batch, int cin, int h, int w, int cout) {
  std::vector<double> y(static_cast<size_t>(batch) * cout * h * w, 0.0);
  for (int b = 0; b < batch; ++b)
    for (int co = 0; co < cout; ++co)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
          double acc = 0.0;
          for (int ci = 0; ci < cin; ++ci)
            for (int dy = 0; dy < 3; ++dy)
              for (int dx = 0; dx < 3; ++dx) {
                const int sy = yy + dy - 1, sx = xx + dx - 1;
                if (sy < 0 || sy >= h || sx < 0 || sx >= w) continue;
                acc += x[((static_cast<size_t>(b) * cin + ci) * h + sy) * w + sx] *
                       k[((static_cast<size_t>(co) * cin + ci) * 3 + dy) * 3 + dx];
              }
          y[((static_cast<size_t>(b) * cout + co) * h + yy) * w + xx] = acc;
        }
  return y;
}

// 2x2 window, 2x2 stride maximum
inline std::vector<double> maxpool2d(const std::vector<double>& x, int batch, int ch, int h,
                                     int w) {
  const int oh = h / 2, ow = w / 2;
  std::vector<double> y(static_cast<size_t>(batch) * ch * oh * ow);
  for (int p = 0; p < batch * ch; ++p)
    for (int yy = 0; yy < oh; ++yy)
      for (int xx = 0; xx < ow; ++xx) {
        double best = -1e300;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx)
            best = std::max(best,
                            x[(static_cast<size_t>(p) * h + 2 * yy + dy) * w + 2 * xx + dx]);
        y[(static_cast<size_t>(p) * oh + yy) * ow + xx] = best;
      }
  return y;
}

// O(n^2) forward DFT
inline std::vector<std::complex<double>> naive_dft(const std::vector<std::complex<double>>& x) {
  const size_t n = x.size();
  std::vector<std::complex<double>> out(n);
  for (size_t k = 0; k < n; ++k) {
    std::complex<double> acc(0.0, 0.0);
    for (size_t t = 0; t < n; ++t) {
      const double ang = -2.0 * 3.14159265358979323846 * static_cast<double>(k) *
                         static_cast<double>(t) / static_cast<double>(n);
      acc += x[t] * std::complex<double>(std::cos(ang), std::sin(ang));
    }
    out[k] = acc;
  }
  return out;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// one LSTM cell worked gate by gate for a single sample
struct LstmOracleOut {
  std::vector<double> h, c;
};
inline LstmOracleOut lstm_step(const std::vector<double>& x, const std::vector<double>& h,
                               const std::vector<double>& c, const std::vector<double>& w_ih,
                               const std::vector<double>& w_hh, const std::vector<double>& b,
                               int in_dim, int hidden) {
  LstmOracleOut out;
  out.h.resize(static_cast<size_t>(hidden));
  out.c.resize(static_cast<size_t>(hidden));
  const auto gate_pre = [&](int gate, int unit) {
    const int row = gate * hidden + unit;
    double acc = b[static_cast<size_t>(row)];
    for (int i = 0; i < in_dim; ++i)
      acc += w_ih[static_cast<size_t>(row) * in_dim + i] * x[static_cast<size_t>(i)];
    for (int i = 0; i < hidden; ++i)
      acc += w_hh[static_cast<size_t>(row) * hidden + i] * h[static_cast<size_t>(i)];
    return acc;
  };
  for (int u = 0; u < hidden; ++u) {
    const double gi = sigmoid(gate_pre(0, u));
    const double gf = sigmoid(gate_pre(1, u));
    const double gg = std::tanh(gate_pre(2, u));
    const double go = sigmoid(gate_pre(3, u));
    out.c[static_cast<size_t>(u)] = gf * c[static_cast<size_t>(u)] + gi * gg;
    out.h[static_cast<size_t>(u)] = go * std::tanh(out.c[static_cast<size_t>(u)]);
  }
  return out;
}

// one-hidden-layer scorer spelled out as two hand matmuls
inline double disc_score(const std::vector<double>& pair_in, const std::vector<double>& w_hidden,
                         const std::vector<double>& b_hidden, const std::vector<double>& w_out,
                         double b_out, int in_dim, int hidden) {
  double score = b_out;
  for (int hu = 0; hu < hidden; ++hu) {
    double pre = b_hidden[static_cast<size_t>(hu)];
    for (int i = 0; i < in_dim; ++i)
      pre += w_hidden[static_cast<size_t>(hu) * in_dim + i] * pair_in[static_cast<size_t>(i)];
    score += w_out[static_cast<size_t>(hu)] * std::max(0.0, pre);
  }
  return score;
}

}  // namespace oracles
