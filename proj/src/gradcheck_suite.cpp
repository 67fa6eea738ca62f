#include "crfuse/gradcheck_suite.hpp"

#include <cmath>

#include "crfuse/data_synth.hpp"
#include "crfuse/model.hpp"

namespace crfuse {

namespace {

using DTensor = TensorT<double>;
using DTape = TapeT<double>;
using DStore = ParamStoreT<double>;

DTensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  DTensor t(std::move(shape));
  for (long i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

// values in ±[0.2, 1.2]: at least 0.2 away from the ReLU kink so probes
// cannot cross it
DTensor kink_free_tensor(Shape shape, Rng& rng) {
  DTensor t(std::move(shape));
  for (long i = 0; i < t.size(); ++i) {
    const double mag = rng.uniform(0.2, 1.2);
    t.data()[i] = rng.next_double() < 0.5 ? -mag : mag;
  }
  return t;
}

// fixed-coefficient projection to a scalar, so gradients are non-uniform
DTensor wsum(DTape& tape, const DTensor& x, uint64_t seed) {
  Rng rng(seed);
  DTensor w(x.shape());
  for (long i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1.0, 1.0);
  return sum(tape, mul(tape, x, w));
}

template <typename Build>
GradCheckCase check_case(const std::string& name, DStore params, Build&& build,
                         const GradCheckSuiteOptions& opt, int probes = 0) {
  GradCheckOptions gopt;
  gopt.h = opt.h;
  gopt.tol = opt.tol;
  gopt.probes_per_param = probes;
  gopt.seed = derive_seed(opt.seed, name);
  GradCheckCase c;
  c.name = name;
  c.report = grad_check(build, params, gopt);
  return c;
}

}  // namespace

std::vector<GradCheckCase> run_gradcheck_suite(const GradCheckSuiteOptions& opt) {
  std::vector<GradCheckCase> cases;
  Rng rng(derive_seed(opt.seed, "gradcheck_suite"));
  const uint64_t ws = derive_seed(opt.seed, "wsum");

  {
    DStore ps;
    ps.add("a", random_tensor({3, 4}, rng));
    ps.add("b", random_tensor({3, 4}, rng));
    cases.push_back(check_case(
        "add", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, add(t, p.get("a"), p.get("b")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("a", random_tensor({3, 4}, rng));
    ps.add("b", random_tensor({3, 4}, rng));
    cases.push_back(check_case(
        "sub", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, sub(t, p.get("a"), p.get("b")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("a", random_tensor({3, 4}, rng));
    ps.add("b", random_tensor({3, 4}, rng));
    cases.push_back(check_case(
        "mul", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, mul(t, p.get("a"), p.get("b")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({3, 4}, rng));
    cases.push_back(check_case(
        "scale", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, scale(t, p.get("x"), -0.37), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({4, 5}, rng));
    ps.add("bias", random_tensor({5}, rng));
    cases.push_back(check_case(
        "add_row_bias", std::move(ps),
        [&](DTape& t, DStore& p) {
          return wsum(t, add_row_bias(t, p.get("x"), p.get("bias")), ws);
        },
        opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({2, 3, 4, 4}, rng));
    ps.add("bias", random_tensor({3}, rng));
    cases.push_back(check_case(
        "add_channel_bias", std::move(ps),
        [&](DTape& t, DStore& p) {
          return wsum(t, add_channel_bias(t, p.get("x"), p.get("bias")), ws);
        },
        opt));
  }
  {
    DStore ps;
    ps.add("x", kink_free_tensor({3, 7}, rng));
    cases.push_back(check_case(
        "relu", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, relu(t, p.get("x")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({3, 7}, rng, -3.0, 3.0));
    cases.push_back(check_case(
        "sigmoid", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, sigmoid(t, p.get("x")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({3, 7}, rng, -2.0, 2.0));
    cases.push_back(check_case(
        "tanh", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, tanh_act(t, p.get("x")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("a", random_tensor({3, 4}, rng));
    ps.add("b", random_tensor({4, 5}, rng));
    cases.push_back(check_case(
        "matmul", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, matmul(t, p.get("a"), p.get("b")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("a", random_tensor({3, 4}, rng));
    ps.add("b", random_tensor({5, 4}, rng));
    cases.push_back(check_case(
        "matmul_nt", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, matmul_nt(t, p.get("a"), p.get("b")), ws); },
        opt));
  }
  {
    DStore ps;
    ps.add("a", random_tensor({3, 2}, rng));
    ps.add("b", random_tensor({3, 4}, rng));
    cases.push_back(check_case(
        "concat_cols", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, concat_cols(t, p.get("a"), p.get("b")), ws); },
        opt));
  }
  {
    DStore ps;
    ps.add("a", random_tensor({2, 3}, rng));
    ps.add("b", random_tensor({4, 3}, rng));
    ps.add("c", random_tensor({1, 3}, rng));
    cases.push_back(check_case(
        "concat_rows", std::move(ps),
        [&](DTape& t, DStore& p) {
          return wsum(t, concat_rows(t, {p.get("a"), p.get("b"), p.get("c")}), ws);
        },
        opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({3, 6}, rng));
    cases.push_back(check_case(
        "slice_cols", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, slice_cols(t, p.get("x"), 1, 3), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({6, 3}, rng));
    cases.push_back(check_case(
        "slice_rows", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, slice_rows(t, p.get("x"), 2, 3), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({5, 3}, rng));
    cases.push_back(check_case(
        "take_rows", std::move(ps),
        [&](DTape& t, DStore& p) {
          return wsum(t, take_rows(t, p.get("x"), {0, 2, 2, 4}), ws);
        },
        opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({3, 4}, rng));
    cases.push_back(check_case(
        "reshape", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, reshape(t, p.get("x"), {2, 6}), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({2, 2, 4, 4}, rng));
    ps.add("k", random_tensor({3, 2, 3, 3}, rng));
    cases.push_back(check_case(
        "conv2d", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, conv2d(t, p.get("x"), p.get("k")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({2, 2, 4, 4}, rng));
    cases.push_back(check_case(
        "maxpool2d", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, maxpool2d(t, p.get("x")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({9}, rng, -2.0, 2.0));
    cases.push_back(check_case(
        "logsumexp", std::move(ps),
        [&](DTape& t, DStore& p) { return logsumexp(t, p.get("x")); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({4, 5}, rng, -2.0, 2.0));
    cases.push_back(check_case(
        "logsumexp_rows", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, logsumexp_rows(t, p.get("x")), ws); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({4, 5}, rng));
    cases.push_back(check_case(
        "take_per_row", std::move(ps),
        [&](DTape& t, DStore& p) {
          return wsum(t, take_per_row(t, p.get("x"), {3, 0, 4, 2}), ws);
        },
        opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({3, 4}, rng));
    cases.push_back(check_case(
        "sum", std::move(ps), [&](DTape& t, DStore& p) { return sum(t, p.get("x")); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({3, 4}, rng));
    cases.push_back(check_case(
        "mean", std::move(ps), [&](DTape& t, DStore& p) { return mean(t, p.get("x")); }, opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({3, 6}, rng, -2.0, 2.0));
    cases.push_back(check_case(
        "softmax_rows_masked", std::move(ps),
        [&](DTape& t, DStore& p) {
          return wsum(t, softmax_rows_masked(t, p.get("x"), {2, 4, 6}), ws);
        },
        opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({4, 5}, rng));
    ps.add("w", random_tensor({4}, rng));
    cases.push_back(check_case(
        "scale_rows", std::move(ps),
        [&](DTape& t, DStore& p) { return wsum(t, scale_rows(t, p.get("x"), p.get("w")), ws); },
        opt));
  }
  {
    DStore ps;
    ps.add("u", random_tensor({3, 6}, rng));
    ps.add("v", random_tensor({4, 6}, rng));
    ps.add("b", random_tensor({6}, rng));
    ps.add("w", random_tensor({6}, rng));
    ps.add("c", random_tensor({1}, rng));
    cases.push_back(check_case(
        "pairwise_score", std::move(ps),
        [&](DTape& t, DStore& p) {
          return wsum(t,
                      pairwise_score(t, p.get("u"), p.get("v"), p.get("b"), p.get("w"),
                                     reshape(t, p.get("c"), Shape{})),
                      ws);
        },
        opt));
  }
  {
    DStore ps;
    ps.add("x", random_tensor({2, 3}, rng));
    ps.add("h", random_tensor({2, 4}, rng, -0.5, 0.5));
    ps.add("c", random_tensor({2, 4}, rng, -0.5, 0.5));
    ps.add("w_ih", random_tensor({16, 3}, rng));
    ps.add("w_hh", random_tensor({16, 4}, rng));
    ps.add("b", random_tensor({16}, rng, -0.3, 0.3));
    cases.push_back(check_case(
        "lstm_step", std::move(ps),
        [&](DTape& t, DStore& p) {
          auto next = lstm_step(t, p.get("x"), LstmState<double>{p.get("h"), p.get("c")},
                                p.get("w_ih"), p.get("w_hh"), p.get("b"));
          return add(t, wsum(t, next.h, ws), wsum(t, next.c, derive_seed(ws, "c")));
        },
        opt));
  }
  {
    DStore ps;
    ps.add("s", random_tensor({4, 5}, rng, -2.0, 2.0));
    cases.push_back(check_case(
        "cross_entropy_loss", std::move(ps),
        [&](DTape& t, DStore& p) { return cross_entropy_loss(t, p.get("s"), {1, 0, 4, 2}); },
        opt));
  }
  {
    DStore ps;
    ps.add("s", random_tensor({3, 6}, rng, -2.0, 2.0));
    cases.push_back(check_case(
        "info_nce_from_scores", std::move(ps),
        [&](DTape& t, DStore& p) {
          return info_nce_from_scores(t, p.get("s"), {0, 1, 2}, {{3, 4}, {5}, {0, 1, 4}});
        },
        opt));
  }
  {
    DStore ps;
    ps.add("l1", random_tensor({1}, rng, 0.5, 2.0));
    ps.add("l2", random_tensor({1}, rng, 0.5, 2.0));
    cases.push_back(check_case(
        "combined_loss", std::move(ps),
        [&](DTape& t, DStore& p) {
          return combined_loss(t, reshape(t, p.get("l1"), Shape{}),
                               reshape(t, p.get("l2"), Shape{}), 0.3);
        },
        opt));
  }

  // Complete training graph on a 2-sample batch: both encoders, fused
  // classifier, cross-entropy, pairwise discriminator and contrastive term.
  {
    SynthConfig scfg;
    scfg.classes = 4;
    scfg.samples_per_class = 1;
    scfg.conflict_rate = 0.0;
    // Large feature magnitudes push the ReLU preactivations away from zero,
    // so the +-h probes stay inside the base point's linear region almost
    // everywhere (the pattern filter drops the rare stragglers).
    scfg.noise_sigma = 10.0;
    scfg.seed = derive_seed(opt.seed, "composite-data");
    const Dataset data = generate(scfg);

    Batch batch;
    batch.sample_indices = {0, 1};
    batch.labels = {0, 1};
    batch.negatives = {{1}, {0}};

    DStore ps = init_model_params<double>(4, derive_seed(opt.seed, "composite-params"), true);
    cases.push_back(check_case(
        "composite_combined_loss", std::move(ps),
        [&, batch](DTape& t, DStore& p) {
          return batch_loss(t, p, data, batch, 0.1, true).total;
        },
        opt, opt.composite_probes));
  }

  return cases;
}

bool gradcheck_suite_passed(const std::vector<GradCheckCase>& cases) {
  for (const auto& c : cases)
    if (!c.report.pass) return false;
  return true;
}

}  // namespace crfuse
