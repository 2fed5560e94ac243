// Acceptance gate. Each subcommand exercises one release criterion end to
// end and prints a single [PASS]/[FAIL] line with the measured numbers;
// `acceptance all` runs the lot in order. Exit status 0 iff every line
// printed PASS. Criteria are deliberately self-contained: each builds its
// own models, data and oracles so a failure points at exactly one property.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <iomanip>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "contextflow/core/error.hpp"
#include "contextflow/core/linalg.hpp"
#include "contextflow/core/ndarray.hpp"
#include "contextflow/core/param_store.hpp"
#include "contextflow/core/rng.hpp"
#include "contextflow/core/tensor.hpp"
#include "contextflow/data/datasets.hpp"
#include "contextflow/enc/encoders.hpp"
#include "contextflow/flow/gmm_head.hpp"
#include "contextflow/flow/layers.hpp"
#include "contextflow/flow/mask.hpp"
#include "contextflow/flow/model.hpp"
#include "contextflow/train/metrics.hpp"
#include "contextflow/train/schedule.hpp"
#include "contextflow/train/trainer.hpp"
#include "testutil.hpp"

using namespace contextflow;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string sci(double v) {
  std::ostringstream os;
  os << std::scientific << std::setprecision(2) << v;
  return os.str();
}

std::string fix(double v, int prec = 4) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

Encoded fake_ctx(std::size_t n, std::size_t w, Rng& rng) {
  return {Tensor::constant(NdArray::normal({n, w}, rng)),
          Tensor::constant(NdArray::zeros({n}))};
}

// fresh gaussian values for every trainable entry; buffers stay put
void randomize(ParamStore& store, Rng& rng, double sd) {
  for (const std::string& name : store.names()) {
    if (!store.is_trainable(name)) continue;
    Tensor t = store.get(name);
    t.mutable_value() = NdArray::normal(t.shape(), rng, sd);
  }
}

// additive perturbation on top of the constructor values. The round-trip
// and logdet suites use this rather than a plain overwrite: it keeps the
// 1x1 conv weights near their random-rotation init (overwriting them with
// raw gaussians leaves the occasional near-singular matrix whose inverse
// amplifies beyond the tolerance) while still moving every parameter.
void perturb(ParamStore& store, const std::string& prefix, Rng& rng, double sd) {
  for (const std::string& name : store.names(prefix)) {
    if (!store.is_trainable(name)) continue;
    NdArray& v = store.get(name).mutable_value();
    for (std::size_t i = 0; i < v.numel(); ++i) v.data()[i] += sd * rng.normal();
  }
}

double layer_round_trip(Layer& layer, const NdArray& x, const LayerIo& io) {
  LayerResult down = layer.inverse(Tensor::constant(x), io);
  LayerResult up = layer.forward(down.output, io);
  return testutil::max_abs_diff(up.output.value(), x);
}

double layer_numeric_logdet(Layer& layer, const NdArray& x, const LayerIo& io) {
  const std::size_t d = x.numel();
  auto f = [&](const std::vector<double>& in) {
    NdArray xi(x.shape(), in);
    return layer.inverse(Tensor::constant(xi), io).output.value().vec();
  };
  auto jac = testutil::numeric_jacobian(f, x.vec(), 1e-6);
  NdArray jm({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) jm.at({i, j}) = jac[i][j];
  }
  return lu_logabsdet(jm).logabsdet;
}

// Bijection-only replica of the model's block layout (split priors are
// surjective and sit out the round-trip suites): per block squeeze when the
// sample has positions, then sub_blocks x (actnorm, conv1x1, coupling with
// parity l % 2 wherever the mask can partition the shape).
struct Stack {
  ParamStore store;
  std::vector<std::unique_ptr<Layer>> layers;
};

Shape build_stack(Stack& st, Shape s, std::size_t blocks, std::size_t sub, MaskKind mask,
                  CondMode mode, std::size_t ctx_w, std::size_t cn_hidden, Rng& rng) {
  auto nm = [&](const char* kind) {
    return "g/" + std::to_string(st.layers.size()) + "/" + kind;
  };
  const bool concat = mode == CondMode::kConcat;
  for (std::size_t b = 0; b < blocks; ++b) {
    if (s.size() >= 2) {
      auto sq = std::make_unique<Squeeze>(s);
      s = sq->out_shape(s);
      st.layers.push_back(std::move(sq));
    }
    for (std::size_t l = 0; l < sub; ++l) {
      const std::string an_base = nm("an");
      auto an = std::make_unique<ActNorm>(st.store, an_base, s[0], mode, /*data_init=*/false);
      if (concat) an->allocate_condition(st.store, an_base + "/cn", ctx_w, cn_hidden, rng);
      st.layers.push_back(std::move(an));

      const std::string cv_base = nm("cv");
      auto cv = std::make_unique<Conv1x1>(st.store, cv_base, s[0], mode, /*conv_context=*/true,
                                          rng);
      if (concat) cv->allocate_condition(st.store, cv_base + "/cn", ctx_w, cn_hidden, rng);
      st.layers.push_back(std::move(cv));

      const bool can_couple = mask == MaskKind::kCheckerboard
                                  ? (s.size() >= 2 && s.back() % 2 == 0)
                                  : s[0] >= 2;
      if (can_couple) {
        st.layers.push_back(std::make_unique<Coupling>(st.store, nm("cp"), s,
                                                       MaskSpec{mask, int(l % 2)}, 2, mode,
                                                       concat ? ctx_w : 0, cn_hidden, rng, 6));
      }
    }
  }
  if (mode == CondMode::kAdditive && ctx_w > 0) {
    for (std::size_t i = 0; i < st.layers.size(); ++i) {
      st.layers[i]->attach_specialist(st.store, "s/" + std::to_string(i), ctx_w, cn_hidden, rng);
    }
  }
  return s;
}

double stack_round_trip(Stack& st, const NdArray& x, const LayerIo& io) {
  Tensor v = Tensor::constant(x);
  for (auto& l : st.layers) v = l->inverse(v, io).output;
  for (auto it = st.layers.rbegin(); it != st.layers.rend(); ++it) {
    v = (*it)->forward(v, io).output;
  }
  return testutil::max_abs_diff(v.value(), x);
}

double stack_analytic_logdet(Stack& st, const NdArray& x, const LayerIo& io) {
  Tensor v = Tensor::constant(x);
  double acc = 0.0;
  for (auto& l : st.layers) {
    LayerResult r = l->inverse(v, io);
    acc += r.logdet.value()[0];
    v = r.output;
  }
  return acc;
}

double stack_numeric_logdet(Stack& st, const NdArray& x, const LayerIo& io) {
  const std::size_t d = x.numel();
  auto f = [&](const std::vector<double>& in) {
    Tensor v = Tensor::constant(NdArray(x.shape(), in));
    for (auto& l : st.layers) v = l->inverse(v, io).output;
    return v.value().vec();
  };
  auto jac = testutil::numeric_jacobian(f, x.vec(), 1e-6);
  NdArray jm({d, d});
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) jm.at({i, j}) = jac[i][j];
  }
  return lu_logabsdet(jm).logabsdet;
}

double mean_nll(FlowModel& model, const Dataset& ds, std::uint64_t seed) {
  return -testutil::mean_of(score_total(model, ds, seed));
}

// ---- criterion: invertibility ------------------------------------------------
// every bijection layer plus complete stacks up to (B, L) = (2, 2), random
// parameters, 1000 random inputs each; forward(inverse(v, c), c) must return
// v to better than 1e-8.

Outcome run_invertibility() {
  Rng rng(101);
  double worst = 0.0;
  std::size_t cases = 0;
  auto track = [&](double e) {
    worst = std::max(worst, e);
    ++cases;
    if (std::getenv("ACCEPTANCE_TRACE")) std::fprintf(stderr, "  case %zu: %.3e\n", cases, e);
  };

  {
    ParamStore store;
    ActNorm an(store, "g/an", 3, CondMode::kAdditive, false);
    an.attach_specialist(store, "s/an", 4, 8, rng);
    perturb(store, "", rng, 0.4);
    Encoded ctx = fake_ctx(1000, 4, rng);
    LayerIo io;
    io.ctx = &ctx;
    track(layer_round_trip(an, NdArray::normal({1000, 3, 4}, rng), io));
  }
  {
    ParamStore store;
    ActNorm an(store, "g/an", 2, CondMode::kConcat, false);
    an.allocate_condition(store, "g/an/cn", 3, 8, rng);
    perturb(store, "", rng, 0.4);
    Encoded ctx = fake_ctx(1000, 3, rng);
    LayerIo io;
    io.ctx = &ctx;
    track(layer_round_trip(an, NdArray::normal({1000, 2, 2}, rng), io));
  }
  {
    ParamStore store;
    Conv1x1 cv(store, "g/cv", 3, CondMode::kAdditive, true, rng);
    cv.attach_specialist(store, "s/cv", 4, 8, rng);
    perturb(store, "", rng, 0.4);
    Encoded ctx = fake_ctx(1000, 4, rng);
    LayerIo io;
    io.ctx = &ctx;
    track(layer_round_trip(cv, NdArray::normal({1000, 3, 2}, rng), io));
  }
  {
    ParamStore store;
    Conv1x1 cv(store, "g/cv", 2, CondMode::kConcat, false, rng);
    cv.allocate_condition(store, "g/cv/cn", 3, 8, rng);
    perturb(store, "", rng, 0.3);
    Encoded ctx = fake_ctx(1000, 3, rng);
    LayerIo io;
    io.ctx = &ctx;
    track(layer_round_trip(cv, NdArray::normal({1000, 2, 2}, rng), io));
  }
  for (MaskKind kind : {MaskKind::kChannelHalf, MaskKind::kCheckerboard,
                        MaskKind::kAlternating}) {
    for (int parity = 0; parity < 2; ++parity) {
      ParamStore store;
      Shape shape = kind == MaskKind::kAlternating ? Shape{6} : Shape{2, 4, 4};
      Coupling cp(store, "g/cp", shape, MaskSpec{kind, parity}, 4, CondMode::kAdditive, 0, 8,
                  rng);
      cp.attach_specialist(store, "s/cp", 3, 8, rng);
      perturb(store, "", rng, 0.4);
      Encoded ctx = fake_ctx(1000, 3, rng);
      LayerIo io;
      io.ctx = &ctx;
      Shape batched = shape;
      batched.insert(batched.begin(), 1000);
      track(layer_round_trip(cp, NdArray::normal(batched, rng), io));
    }
  }
  {
    // the permutation layers carry no parameters but are bijections all the same
    LayerIo io;
    Squeeze sq({2, 4, 4});
    track(layer_round_trip(sq, NdArray::normal({1000, 2, 4, 4}, rng), io));
    PermuteAxes pa({3, 4});
    track(layer_round_trip(pa, NdArray::normal({1000, 3, 4}, rng), io));
  }

  // complete stacks in the model's layer order, every (B, L) up to (2, 2),
  // both conditioning modes, image and flat inputs. Perturbation scale 0.05
  // keeps the composed map's amplification bounded: after two squeezes the
  // 1x1 convs act on 32 channels, where matrix noise rivals the rotation
  // init and the occasional sample drifts toward singular; a chain of such
  // layers pushes intermediates to where 1e-8 absolute accuracy is
  // unrepresentable.
  std::size_t stacks = 0;
  for (std::size_t blocks = 1; blocks <= 2; ++blocks) {
    for (std::size_t sub = 1; sub <= 2; ++sub) {
      for (CondMode mode : {CondMode::kAdditive, CondMode::kConcat}) {
        {
          Stack st;
          build_stack(st, {2, 4, 4}, blocks, sub, MaskKind::kChannelHalf, mode, 5, 8, rng);
          perturb(st.store, "", rng, 0.05);
          Encoded ctx = fake_ctx(1000, 5, rng);
          LayerIo io;
          io.ctx = &ctx;
          track(stack_round_trip(st, NdArray::normal({1000, 2, 4, 4}, rng), io));
          ++stacks;
        }
        {
          Stack st;
          build_stack(st, {6}, blocks, sub, MaskKind::kAlternating, mode, 5, 8, rng);
          perturb(st.store, "", rng, 0.05);
          Encoded ctx = fake_ctx(1000, 5, rng);
          LayerIo io;
          io.ctx = &ctx;
          track(stack_round_trip(st, NdArray::normal({1000, 6}, rng), io));
          ++stacks;
        }
      }
    }
  }
  {
    // checkerboard masks live where the spatial extent stays even
    Stack st;
    build_stack(st, {1, 4, 4}, 1, 2, MaskKind::kCheckerboard, CondMode::kAdditive, 4, 8, rng);
    perturb(st.store, "", rng, 0.05);
    Encoded ctx = fake_ctx(1000, 4, rng);
    LayerIo io;
    io.ctx = &ctx;
    track(stack_round_trip(st, NdArray::normal({1000, 1, 4, 4}, rng), io));
    ++stacks;
  }

  const bool ok = worst < 1e-8;
  return {ok, "max round-trip error " + sci(worst) + " over " + std::to_string(cases) +
                  " cases incl. " + std::to_string(stacks) +
                  " full stacks (1000 inputs each), bound 1e-8"};
}

// ---- criterion: logdet ---------------------------------------------------------
// analytic log|det J| per layer and summed over composed stacks (dim <= 8)
// against numerically assembled Jacobians, relative 1e-4.

Outcome run_logdet() {
  Rng rng(202);
  double worst = 0.0;
  std::size_t cases = 0;
  auto track = [&](double analytic, double numeric) {
    worst = std::max(worst, testutil::rel_err(analytic, numeric));
    ++cases;
  };

  {
    ParamStore store;
    ActNorm an(store, "g/an", 3, CondMode::kAdditive, false);
    an.attach_specialist(store, "s/an", 4, 8, rng);
    perturb(store, "", rng, 0.4);
    Encoded ctx = fake_ctx(1, 4, rng);
    LayerIo io;
    io.ctx = &ctx;
    NdArray x = NdArray::normal({1, 3, 2}, rng);
    track(an.inverse(Tensor::constant(x), io).logdet.value()[0],
          layer_numeric_logdet(an, x, io));
  }
  {
    ParamStore store;
    ActNorm an(store, "g/an", 2, CondMode::kConcat, false);
    an.allocate_condition(store, "g/an/cn", 3, 8, rng);
    perturb(store, "", rng, 0.4);
    Encoded ctx = fake_ctx(1, 3, rng);
    LayerIo io;
    io.ctx = &ctx;
    NdArray x = NdArray::normal({1, 2, 2}, rng);
    track(an.inverse(Tensor::constant(x), io).logdet.value()[0],
          layer_numeric_logdet(an, x, io));
  }
  {
    ParamStore store;
    Conv1x1 cv(store, "g/cv", 4, CondMode::kAdditive, true, rng);
    cv.attach_specialist(store, "s/cv", 3, 8, rng);
    perturb(store, "", rng, 0.3);
    Encoded ctx = fake_ctx(1, 3, rng);
    LayerIo io;
    io.ctx = &ctx;
    NdArray x = NdArray::normal({1, 4}, rng);
    track(cv.inverse(Tensor::constant(x), io).logdet.value()[0],
          layer_numeric_logdet(cv, x, io));
  }
  {
    ParamStore store;
    Conv1x1 cv(store, "g/cv", 3, CondMode::kConcat, false, rng);
    cv.allocate_condition(store, "g/cv/cn", 4, 8, rng);
    perturb(store, "", rng, 0.3);
    Encoded ctx = fake_ctx(1, 4, rng);
    LayerIo io;
    io.ctx = &ctx;
    NdArray x = NdArray::normal({1, 3, 2}, rng);
    track(cv.inverse(Tensor::constant(x), io).logdet.value()[0],
          layer_numeric_logdet(cv, x, io));
  }
  for (MaskKind kind : {MaskKind::kChannelHalf, MaskKind::kCheckerboard,
                        MaskKind::kAlternating}) {
    ParamStore store;
    Shape shape = kind == MaskKind::kAlternating ? Shape{6} : Shape{2, 2, 2};
    Coupling cp(store, "g/cp", shape, MaskSpec{kind, 0}, 4, CondMode::kAdditive, 0, 8, rng);
    cp.attach_specialist(store, "s/cp", 3, 8, rng);
    perturb(store, "", rng, 0.4);
    Encoded ctx = fake_ctx(1, 3, rng);
    LayerIo io;
    io.ctx = &ctx;
    Shape batched = shape;
    batched.insert(batched.begin(), 1);
    NdArray x = NdArray::normal(batched, rng);
    track(cp.inverse(Tensor::constant(x), io).logdet.value()[0],
          layer_numeric_logdet(cp, x, io));
  }
  {
    // volume-preserving permutations: analytic zero against the numeric det
    LayerIo io;
    Squeeze sq({2, 2, 2});
    NdArray x = NdArray::normal({1, 2, 2, 2}, rng);
    track(sq.inverse(Tensor::constant(x), io).logdet.value()[0],
          layer_numeric_logdet(sq, x, io));
    PermuteAxes pa({2, 3});
    NdArray y = NdArray::normal({1, 2, 3}, rng);
    track(pa.inverse(Tensor::constant(y), io).logdet.value()[0],
          layer_numeric_logdet(pa, y, io));
  }

  // composed stacks: summed analytic logdet vs the Jacobian of the whole map
  {
    Stack st;
    build_stack(st, {6}, 2, 2, MaskKind::kAlternating, CondMode::kAdditive, 4, 6, rng);
    perturb(st.store, "", rng, 0.3);
    Encoded ctx = fake_ctx(1, 4, rng);
    LayerIo io;
    io.ctx = &ctx;
    NdArray x = NdArray::normal({1, 6}, rng);
    track(stack_analytic_logdet(st, x, io), stack_numeric_logdet(st, x, io));
  }
  {
    Stack st;
    build_stack(st, {2, 2, 2}, 1, 2, MaskKind::kChannelHalf, CondMode::kAdditive, 4, 6, rng);
    perturb(st.store, "", rng, 0.3);
    Encoded ctx = fake_ctx(1, 4, rng);
    LayerIo io;
    io.ctx = &ctx;
    NdArray x = NdArray::normal({1, 2, 2, 2}, rng);
    track(stack_analytic_logdet(st, x, io), stack_numeric_logdet(st, x, io));
  }
  {
    Stack st;
    build_stack(st, {6}, 1, 2, MaskKind::kAlternating, CondMode::kConcat, 4, 6, rng);
    perturb(st.store, "", rng, 0.3);
    Encoded ctx = fake_ctx(1, 4, rng);
    LayerIo io;
    io.ctx = &ctx;
    NdArray x = NdArray::normal({1, 6}, rng);
    track(stack_analytic_logdet(st, x, io), stack_numeric_logdet(st, x, io));
  }

  const bool ok = worst < 1e-4;
  return {ok, "max relative logdet error " + sci(worst) + " over " + std::to_string(cases) +
                  " cases (3 composed stacks, dim <= 8), bound 1e-4"};
}

// ---- criterion: gradients -------------------------------------------------------
// training-loss gradients against central finite differences on a D = 4
// model, every trainable parameter of both phases, relative error < 1e-4.

Outcome run_gradients() {
  FlowConfig cfg;
  cfg.input_shape = {4};
  cfg.blocks = 2;
  cfg.sub_blocks = 1;
  cfg.width_factor = 2;
  cfg.coupling_hidden = 6;
  cfg.cn_hidden = 5;
  cfg.mask = MaskKind::kAlternating;
  cfg.mode = CondMode::kAdditive;
  cfg.conv_context = true;
  cfg.data_dequant = DataDequant::kNone;
  cfg.head.classes = 2;
  cfg.head.components = 2;
  ContextVar site;
  site.name = "site";
  site.cardinality = 3;
  site.mapping = Mapping::kInteger;
  site.encoder = EncoderKind::kEmbedStoch;
  ContextVar knob;
  knob.name = "knob";
  knob.cardinality = 4;
  knob.mapping = Mapping::kInteger;
  knob.encoder = EncoderKind::kVariational;
  cfg.context.vars = {site, knob};

  FlowModel model(cfg, 7);
  Rng data_rng(33);
  NdArray data = NdArray::normal({6, 4}, data_rng);
  NdArray ctx({6, 2});
  for (std::size_t i = 0; i < 6; ++i) {
    ctx.at({i, 0}) = double(i % 3);
    ctx.at({i, 1}) = double((2 * i + 1) % 4);
  }
  const std::vector<std::size_t> labels = {0, 1, 0, 1, 1, 0};

  Rng init_rng(44);
  model.init_actnorm(data, nullptr, init_rng);
  // generic parameter values, away from the zero-init stationary point
  Rng bend(61);
  perturb(model.store(), "generalist", bend, 0.2);

  // fixed noise stream per evaluation: the loss is a deterministic function
  // of the parameters, exactly what finite differences require
  auto loss_gen = [&]() {
    Rng r(999);
    LogProbResult res = model.log_prob(data, nullptr, r, /*train_mode=*/true);
    return gmm_loss(res.class_ll, labels, 1e-3);
  };
  const std::vector<Tensor> gen_params = model.store().trainable("generalist");
  const double err_gen = finite_diff_check(loss_gen, gen_params, 1e-5);

  Rng attach_rng(55);
  model.attach_specialist(attach_rng);
  perturb(model.store(), "specialist", bend, 0.2);
  auto loss_spec = [&]() {
    Rng r(998);
    LogProbResult res = model.log_prob(data, &ctx, r, /*train_mode=*/true);
    return gmm_loss(res.class_ll, labels, 1e-3);
  };
  const std::vector<Tensor> spec_params = model.store().trainable("specialist");
  const double err_spec = finite_diff_check(loss_spec, spec_params, 1e-5);

  std::size_t coords = 0;
  for (const Tensor& t : gen_params) coords += t.numel();
  for (const Tensor& t : spec_params) coords += t.numel();

  const bool ok = err_gen < 1e-4 && err_spec < 1e-4;
  return {ok, "max relative gradient error " + sci(std::max(err_gen, err_spec)) +
                  " (generalist " + sci(err_gen) + ", specialist " + sci(err_spec) + ", " +
                  std::to_string(coords) + " coordinates), bound 1e-4"};
}

// ---- criterion: decoupling ------------------------------------------------------
// attaching the specialist must not move log_prob (fresh context nets are
// neutral), and specialist training must never write a generalist value.

Outcome run_decoupling() {
  Rng gen(4242);
  Dataset ds = two_moons_context(1024, 4, gen);

  FlowConfig cfg;
  cfg.input_shape = {2};
  cfg.blocks = 1;
  cfg.sub_blocks = 2;
  cfg.coupling_hidden = 16;
  cfg.cn_hidden = 8;
  cfg.mask = MaskKind::kAlternating;
  cfg.mode = CondMode::kAdditive;
  cfg.data_dequant = DataDequant::kNone;
  cfg.head.classes = 2;
  cfg.head.components = 4;
  cfg.context = ds.context_spec;
  FlowModel model(cfg, 9);

  TrainConfig g;
  g.batch_size = 128;
  g.lr_init = 3e-3;
  g.lr_warm_start = 1e-3;
  g.warmup_epochs = 1;
  g.decay_every = 12;
  g.total_epochs = 4;
  g.seed = 21;
  fit(model, ds, nullptr, g);

  // 100 fixed batches scored in both phases with identical noise streams
  std::vector<Dataset> batches;
  std::vector<std::vector<double>> before;
  for (std::size_t b = 0; b < 100; ++b) {
    std::vector<std::size_t> idx(32);
    for (std::size_t i = 0; i < 32; ++i) idx[i] = (b * 37 + i * 3) % ds.size();
    batches.push_back(select_rows(ds, idx));
  }
  for (std::size_t b = 0; b < 100; ++b) {
    Rng r(5000 + b);
    before.push_back(model.log_prob(batches[b].data, nullptr, r, false).total.value().vec());
  }

  Rng attach_rng(77);
  model.attach_specialist(attach_rng);
  double worst = 0.0;
  for (std::size_t b = 0; b < 100; ++b) {
    Rng r(5000 + b);
    const std::vector<double> after =
        model.log_prob(batches[b].data, &batches[b].contexts, r, false).total.value().vec();
    for (std::size_t i = 0; i < after.size(); ++i) {
      worst = std::max(worst, std::fabs(after[i] - before[b][i]));
    }
  }

  const std::uint64_t fp0 = model.generalist_fingerprint();
  TrainConfig s = g;
  s.phase = Phase::kSpecialist;
  s.batch_size = 64;
  s.total_epochs = 7;  // 16 steps/epoch: comfortably past the 100-step mark
  s.seed = 22;
  TrainLog slog = fit(model, ds, nullptr, s);
  std::size_t steps = 0;
  for (const EpochRow& e : slog.epochs) steps += e.steps;
  const std::uint64_t fp1 = model.store().fingerprint("generalist");

  const bool ok = worst < 1e-9 && steps >= 100 && fp0 == fp1;
  std::ostringstream os;
  os << "max |delta log p| " << sci(worst) << " over 100 batches at attach; generalist "
     << "fingerprint " << (fp0 == fp1 ? "bitwise unchanged" : "CHANGED") << " after " << steps
     << " specialist steps";
  return {ok, os.str()};
}

// ---- criterion: elbo -------------------------------------------------------------
// a trained 1-D dequantizer + flow on uniform categoricals: the Monte-Carlo
// ELBO must stay below the exact log-likelihood -ln K (validity) and land
// within 0.1 nats of it (tightness).

Outcome run_elbo() {
  std::ostringstream os;
  bool ok = true;
  for (std::size_t K : {std::size_t(2), std::size_t(4), std::size_t(8)}) {
    FlowConfig cfg;
    cfg.input_shape = {1};
    cfg.blocks = 1;
    cfg.sub_blocks = 2;
    cfg.mask = MaskKind::kAlternating;  // width 1: couplings sit out, affine layers remain
    cfg.mode = CondMode::kAdditive;
    cfg.data_dequant = DataDequant::kVariational;
    cfg.data_cardinality = K;
    cfg.head.classes = 1;
    cfg.head.components = 4 * K;  // a few mixture components per category bump
    FlowModel model(cfg, 17 + K);

    Dataset train;
    train.data = NdArray({4096, 1});
    for (std::size_t i = 0; i < 4096; ++i) train.data.data()[i] = double(i % K);
    train.contexts = NdArray({4096, 0});

    TrainConfig tc;
    tc.batch_size = 256;
    tc.lr_init = 2e-3;
    tc.lr_warm_start = 5e-4;
    tc.warmup_epochs = 2;
    tc.decay_factor = 10.0;
    tc.decay_every = 30;
    tc.total_epochs = 70;
    tc.weight_decay = 0.0;
    tc.seed = 11 + K;
    fit(model, train, nullptr, tc);

    Dataset big;
    big.data = NdArray({100000, 1});
    for (std::size_t i = 0; i < 100000; ++i) big.data.data()[i] = double(i % K);
    big.contexts = NdArray({100000, 0});
    const std::vector<double> scores = score_total(model, big, 123 + K);
    const double mean = testutil::mean_of(scores);
    const double se = testutil::stddev_of(scores) / std::sqrt(double(scores.size()));
    const double target = -std::log(double(K));

    const bool valid = mean <= target + 3.0 * se;
    const bool tight = mean >= target - 0.1;
    ok = ok && valid && tight;
    os << "K=" << K << ": elbo " << fix(mean) << " vs -lnK " << fix(target) << " (se "
       << sci(se) << (valid ? "" : ", INVALID") << (tight ? "" : ", LOOSE") << "); ";
  }
  return {ok, os.str() + "bounds: <= -lnK + 3se and >= -lnK - 0.1"};
}

// ---- criterion: surjection --------------------------------------------------------
// uniform, argmax, one-hot and variational encoders must decode their own
// samples exactly, 10^4 draws each.

Outcome run_surjection() {
  Rng rng(606);
  const std::size_t draws = 10000;
  std::vector<std::size_t> xs(draws);
  std::size_t mismatches = 0;
  std::ostringstream os;

  {
    for (auto& v : xs) v = rng.uniform_int(7);
    Encoded e = uniform_dequantize(xs, 7, rng);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < draws; ++i) {
      if (std::size_t(std::floor(e.v.value().at({i, 0}))) != xs[i]) ++bad;
    }
    mismatches += bad;
    os << "uniform " << draws - bad << "/" << draws;
  }
  {
    ParamStore store;
    ArgmaxEncoder enc(store, "am", 5, rng);
    perturb(store, "", rng, 0.4);
    for (auto& v : xs) v = rng.uniform_int(5);
    Encoded e = enc.encode(xs, rng);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < draws; ++i) {
      if (enc.decode_one(e.v.value().data() + i * enc.width()) != xs[i]) ++bad;
    }
    mismatches += bad;
    os << ", argmax " << draws - bad << "/" << draws;
  }
  {
    ParamStore store;
    VariationalDequantizer enc(store, "oh", 6, Mapping::kOneHot, rng);
    randomize(store, rng, 0.3);
    for (auto& v : xs) v = rng.uniform_int(6);
    Encoded e = enc.encode(xs, rng);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < draws; ++i) {
      if (enc.decode_one(e.v.value().data() + i * enc.width()) != xs[i]) ++bad;
    }
    mismatches += bad;
    os << ", one-hot " << draws - bad << "/" << draws;
  }
  {
    ParamStore store;
    VariationalDequantizer enc(store, "vd", 9, Mapping::kInteger, rng);
    randomize(store, rng, 0.3);
    for (auto& v : xs) v = rng.uniform_int(9);
    Encoded e = enc.encode(xs, rng);
    std::size_t bad = 0;
    for (std::size_t i = 0; i < draws; ++i) {
      if (enc.decode_one(e.v.value().data() + i * enc.width()) != xs[i]) ++bad;
    }
    mismatches += bad;
    os << ", variational " << draws - bad << "/" << draws;
  }

  return {mismatches == 0, os.str() + " decoded"};
}

// ---- criterion: metrics -----------------------------------------------------------
// the published F1 arithmetic and hand-enumerated ranking metrics.

Outcome run_metrics() {
  bool ok = true;
  std::ostringstream os;

  const double f1 = f1_score(88.64, 99.19);
  ok = ok && std::fabs(f1 - 93.62) <= 0.01;
  os << "F1(88.64, 99.19) = " << fix(f1, 4) << " (want 93.62 +- 0.01)";

  const std::vector<double> s1 = {0.9, 0.8, 0.7, 0.6};
  const std::vector<std::size_t> y1 = {1, 0, 1, 0};
  auto a1 = auroc_score(s1, y1);
  ok = ok && a1 && std::fabs(*a1 - 0.75) < 1e-12;
  auto p1 = average_precision(s1, y1);
  ok = ok && p1 && std::fabs(*p1 - 5.0 / 6.0) < 1e-12;

  const std::vector<std::size_t> y2 = {1, 1, 0, 0};
  auto a2 = auroc_score(s1, y2);  // perfect ranking
  ok = ok && a2 && std::fabs(*a2 - 1.0) < 1e-12;
  auto p2 = average_precision(s1, y2);
  ok = ok && p2 && std::fabs(*p2 - 1.0) < 1e-12;

  const std::vector<std::size_t> y3 = {0, 0, 1, 1};
  auto a3 = auroc_score(s1, y3);  // perfectly wrong ranking
  ok = ok && a3 && std::fabs(*a3 - 0.0) < 1e-12;

  const std::vector<double> tied = {0.5, 0.5, 0.5, 0.5};
  auto a4 = auroc_score(tied, y1);  // all tied: chance with half credit
  ok = ok && a4 && std::fabs(*a4 - 0.5) < 1e-12;

  // undefined cases must stay undefined rather than inventing a number
  ok = ok && !auroc_score(s1, {1, 1, 1, 1}).has_value();
  ok = ok && !average_precision(s1, {0, 0, 0, 0}).has_value();

  os << "; auroc {0.75, 1, 0, 0.5} and ap {5/6, 1} enumerations match";
  return {ok, os.str()};
}

// ---- criterion: schedule -----------------------------------------------------------
// the default schedule at every epoch boundary: linear warm-up 1e-4 -> 1e-3
// over 4 epochs, then decade drops every 12 epochs across 48 total.

Outcome run_schedule() {
  TrainConfig cfg;  // defaults carry the published schedule
  double worst = 0.0;
  for (std::size_t e = 0; e < 48; ++e) {
    const double got = lr_at(e, 0.0, cfg);
    const double want = e < 4 ? 1e-4 + (double(e) / 4.0) * (1e-3 - 1e-4)
                              : 1e-3 / std::pow(10.0, std::floor(double(e) / 12.0));
    worst = std::max(worst, std::fabs(got - want));
  }
  // the four plateaus hit their decade values
  const double plateaus[4] = {lr_at(4, 0.0, cfg), lr_at(12, 0.0, cfg), lr_at(24, 0.0, cfg),
                              lr_at(36, 0.0, cfg)};
  const double decades[4] = {1e-3, 1e-4, 1e-5, 1e-6};
  bool plateau_ok = true;
  for (int i = 0; i < 4; ++i) {
    plateau_ok = plateau_ok && std::fabs(plateaus[i] - decades[i]) <= 1e-12 * decades[i];
  }

  const bool ok = worst == 0.0 && plateau_ok;
  return {ok, "max |lr - oracle| " + sci(worst) + " over 48 epoch boundaries; plateaus {1e-3, "
              "1e-4, 1e-5, 1e-6} " + (plateau_ok ? "match" : "OFF")};
}

// ---- criterion: two_moons ----------------------------------------------------------
// rotated two-moons, 8 contexts, 4k points: the specialist must beat the
// generalist's held-out NLL in >= 4 of 5 seeds and must start its first
// epoch at or below the generalist's final training loss.

Outcome run_two_moons() {
  int wins = 0;
  bool fast_start = true;
  std::ostringstream os;

  for (int s = 0; s < 5; ++s) {
    Rng gen(9000 + s);
    Dataset all = two_moons_context(4000, 8, gen);
    all.has_labels = false;  // density task: both phases optimize the joint NLL
    DatasetSplits sp = split_dataset(all, 40 + s);

    FlowConfig cfg;
    cfg.input_shape = {2};
    cfg.blocks = 1;
    cfg.sub_blocks = 3;
    cfg.coupling_hidden = 24;
    cfg.cn_hidden = 12;
    cfg.mask = MaskKind::kAlternating;
    cfg.mode = CondMode::kAdditive;
    cfg.data_dequant = DataDequant::kNone;
    cfg.head.classes = 1;
    cfg.head.components = 8;
    cfg.context = all.context_spec;
    FlowModel model(cfg, 100 + s);

    TrainConfig g;
    g.batch_size = 128;
    g.lr_init = 3e-3;
    g.lr_warm_start = 1e-3;
    g.warmup_epochs = 2;
    g.decay_every = 12;
    g.total_epochs = 30;
    g.seed = 500 + s;
    TrainLog glog = fit(model, sp.train, nullptr, g);
    const double gen_nll = mean_nll(model, sp.test, 777);

    Rng attach_rng(600 + s);
    model.attach_specialist(attach_rng);
    TrainConfig sc = g;
    sc.phase = Phase::kSpecialist;
    sc.lr_init = 2e-3;
    sc.lr_warm_start = 5e-4;
    sc.total_epochs = 20;
    sc.seed = 700 + s;
    TrainLog slog = fit(model, sp.train, nullptr, sc);
    const double spec_nll = mean_nll(model, sp.test, 777);

    if (spec_nll < gen_nll) ++wins;
    fast_start = fast_start && slog.epochs.front().train_loss <= glog.final_loss();
    os << "s" << s << " gen " << fix(gen_nll, 3) << " spec " << fix(spec_nll, 3) << "; ";
  }

  const bool ok = wins >= 4 && fast_start;
  os << "wins " << wins << "/5 (need >= 4), fast start "
     << (fast_start ? "held" : "VIOLATED") << " on all seeds";
  return {ok, os.str()};
}

// ---- criterion: digits --------------------------------------------------------------
// rotated glyph classification at desk scale: 2k train / 1k test, 8
// rotations, (B, L) = (2, 2), 20 epochs per phase. The specialist must not
// lose to the generalist and both must clear 60% top-1.

Outcome run_digits() {
  Rng gen(31337);
  Dataset all = synthetic_digits(3000, 8, 12, gen);
  std::vector<std::size_t> tr_idx(2000), te_idx(1000);
  for (std::size_t i = 0; i < 2000; ++i) tr_idx[i] = i;
  for (std::size_t i = 0; i < 1000; ++i) te_idx[i] = 2000 + i;
  Dataset train = select_rows(all, tr_idx);
  Dataset test = select_rows(all, te_idx);
  test.split = Split::kTest;

  FlowConfig cfg;
  cfg.input_shape = {1, 12, 12};
  cfg.blocks = 2;
  cfg.sub_blocks = 2;
  cfg.coupling_hidden = 48;
  cfg.cn_hidden = 16;
  cfg.mask = MaskKind::kChannelHalf;
  cfg.mode = CondMode::kAdditive;
  cfg.data_dequant = DataDequant::kUniform;
  cfg.data_cardinality = 256;
  cfg.head.classes = 10;
  cfg.head.components = 8;
  cfg.context = all.context_spec;
  FlowModel model(cfg, 2718);

  TrainConfig g;
  g.batch_size = 128;
  g.lr_init = 2e-3;
  g.lr_warm_start = 5e-4;
  g.warmup_epochs = 2;
  g.decay_every = 8;
  g.total_epochs = 20;
  g.seed = 2101;
  fit(model, train, nullptr, g);
  MetricsReport gen_rep = evaluate_classify(model, test, 9001);
  const double gen_acc = gen_rep.accuracy.value_or(0.0);

  Rng attach_rng(2020);
  model.attach_specialist(attach_rng);
  TrainConfig sc = g;
  sc.phase = Phase::kSpecialist;
  sc.lr_init = 1e-3;
  sc.seed = 2102;
  fit(model, train, nullptr, sc);
  MetricsReport spec_rep = evaluate_classify(model, test, 9001);
  const double spec_acc = spec_rep.accuracy.value_or(0.0);

  const bool ok = spec_acc >= gen_acc && gen_acc > 0.60 && spec_acc > 0.60;
  return {ok, "top-1 generalist " + fix(gen_acc, 4) + ", specialist " + fix(spec_acc, 4) +
                  " (1k held-out rows; specialist >= generalist, both > 0.60)"};
}

// ---- criterion: census ----------------------------------------------------------------
// the per-context cost of the additive design: a specialist's trainable
// parameters must undercut an equal-config concat model's total.

Outcome run_census() {
  FlowConfig cfg;
  cfg.input_shape = {1, 8, 8};
  cfg.blocks = 2;
  cfg.sub_blocks = 2;
  cfg.cn_hidden = 16;
  cfg.mask = MaskKind::kChannelHalf;
  cfg.mode = CondMode::kAdditive;
  cfg.data_dequant = DataDequant::kUniform;
  cfg.head.classes = 10;
  cfg.head.components = 8;
  ContextVar rot;
  rot.name = "rotation";
  rot.cardinality = 8;
  rot.encoder = EncoderKind::kEmbedDet;
  ContextVar type;
  type.name = "type";
  type.cardinality = 4;
  type.encoder = EncoderKind::kEmbedDet;
  ContextVar sev;
  sev.name = "severity";
  sev.cardinality = 6;
  sev.encoder = EncoderKind::kEmbedDet;
  cfg.context.vars = {rot, type, sev};

  FlowModel additive(cfg, 5150);
  Rng init_rng(5151);
  NdArray batch = NdArray::normal({32, 1, 8, 8}, init_rng);
  additive.init_actnorm(batch, nullptr, init_rng);
  Rng attach_rng(5152);
  additive.attach_specialist(attach_rng);
  const std::size_t spec_count = additive.store().param_count("specialist");
  const std::size_t gen_count = additive.generalist_param_count();

  FlowConfig ccfg = cfg;
  ccfg.mode = CondMode::kConcat;
  FlowModel concat(ccfg, 5150);
  const std::size_t concat_count = concat.store().param_count();

  const bool ok = spec_count < concat_count;
  return {ok, "specialist " + std::to_string(spec_count) + " params vs concat total " +
                  std::to_string(concat_count) + " (generalist core " +
                  std::to_string(gen_count) + "); specialist must be strictly smaller"};
}

// ---- runner ---------------------------------------------------------------------------

using Runner = Outcome (*)();

struct Criterion {
  const char* name;
  Runner run;
};

const Criterion kCriteria[] = {
    {"invertibility", run_invertibility},
    {"logdet", run_logdet},
    {"gradients", run_gradients},
    {"decoupling", run_decoupling},
    {"elbo", run_elbo},
    {"surjection", run_surjection},
    {"metrics", run_metrics},
    {"schedule", run_schedule},
    {"two_moons", run_two_moons},
    {"digits", run_digits},
    {"census", run_census},
};

int run_one(const Criterion& c) {
  const auto t0 = std::chrono::steady_clock::now();
  Outcome out;
  try {
    out = c.run();
  } catch (const std::exception& e) {
    out = {false, std::string("unhandled exception: ") + e.what()};
  }
  const double dt =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("[%s] %s: %s [t=%.1fs]\n", out.pass ? "PASS" : "FAIL", c.name,
              out.detail.c_str(), dt);
  std::fflush(stdout);
  return out.pass ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  // keep the report to one line per criterion unless the caller asks for more
  setenv("CONTEXTFLOW_LOG", "error", /*overwrite=*/0);
  if (argc != 2) {
    std::fprintf(stderr, "usage: acceptance <criterion>|all\ncriteria:");
    for (const Criterion& c : kCriteria) std::fprintf(stderr, " %s", c.name);
    std::fprintf(stderr, "\n");
    return 2;
  }
  const std::string want = argv[1];
  bool matched = false;
  int failures = 0;
  for (const Criterion& c : kCriteria) {
    if (want == "all" || want == c.name) {
      matched = true;
      failures += run_one(c);
    }
  }
  if (!matched) {
    std::fprintf(stderr, "unknown criterion '%s'\n", want.c_str());
    return 2;
  }
  return failures == 0 ? 0 : 1;
}
