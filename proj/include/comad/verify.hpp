#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "comad/checkpoint.hpp"
#include "comad/config.hpp"
#include "comad/dataset.hpp"
#include "comad/grad_check.hpp"
#include "comad/model.hpp"
#include "comad/optim.hpp"
#include "comad/probe.hpp"
#include "comad/trainer.hpp"

namespace comad {

struct VerifyOptions {
  // flip-kl-sign negates every divergence inside the non-negativity check, a
  // deliberate fault proving the harness can fail.
  bool fault_flip_kl_sign = false;
};

class VerifyContext {
public:
  VerifyContext(std::ostream& out, VerifyOptions opts)
      : out_(out), opts_(opts) {}

  const VerifyOptions& options() const { return opts_; }

  void check(const std::string& name, bool ok, const std::string& detail = "") {
    ++total_;
    if (ok) {
      out_ << "[ok]   " << name << "\n";
    } else {
      ++failed_;
      out_ << "[FAIL] " << name;
      if (!detail.empty()) out_ << ": " << detail;
      out_ << "\n";
    }
  }

  template <typename F>
  void run(const std::string& name, F&& body) {
    try {
      body();
    } catch (const std::exception& e) {
      check(name, false, std::string("threw: ") + e.what());
    }
  }

  template <typename E, typename F>
  void expect_throw(const std::string& name, F&& body) {
    try {
      body();
      check(name, false, "no error raised");
    } catch (const E&) {
      check(name, true);
    } catch (const std::exception& e) {
      check(name, false, std::string("wrong error type: ") + e.what());
    }
  }

  int failures() const { return failed_; }
  int total() const { return total_; }

private:
  std::ostream& out_;
  VerifyOptions opts_;
  int total_ = 0;
  int failed_ = 0;
};

namespace verify_detail {

using D = double;
using TensorD = Tensor<double>;

inline bool near(double a, double b, double tol) {
  return std::abs(a - b) <= tol * std::max({1.0, std::abs(a), std::abs(b)});
}

inline bool near_abs(double a, double b, double tol) {
  return std::abs(a - b) <= tol;
}

inline Config tiny_config() {
  Config cfg;
  cfg.image_size = 16;
  cfg.patch_size = 4;  // N = 16
  cfg.channels = 3;
  cfg.student_dim = 8;
  cfg.student_depth = 1;
  cfg.student_heads = 2;
  cfg.teacher_dim = 12;
  cfg.teacher_depth = 1;
  cfg.teacher_heads = 2;
  cfg.teacher_count = 3;
  cfg.projection_dim = 8;
  cfg.batch_size = 2;
  cfg.data_count = 16;
  cfg.data_classes = 4;
  cfg.epochs = 2;
  cfg.seed = 11;
  return cfg;
}

// ------------------------------------------------------------------ tensor

inline void check_tensor_ops(VerifyContext& v) {
  Rng rng(401);

  v.run("softmax rows sum to 1", [&] {
    bool ok = true;
    for (int trial = 0; trial < 200 && ok; ++trial) {
      TensorD x = TensorD::randn({4, 7}, rng, 3.0);
      TensorD y = softmax(x, 0.1 + rng.uniform() * 5.0);
      for (std::int64_t r = 0; r < 4; ++r) {
        double s = 0;
        for (std::int64_t j = 0; j < 7; ++j) s += y.at({r, j});
        ok = ok && std::abs(s - 1.0) < 1e-12;
      }
    }
    v.check("softmax rows sum to 1", ok);
  });

  v.run("softmax sharp frozen values", [&] {
    TensorD x = TensorD::from_data({2}, {1.0, 0.0});
    TensorD y = softmax(x, 0.1);
    v.check("softmax sharp frozen values",
            near_abs(y.at({0}), 0.9999546021312976, 1e-12) &&
                near_abs(y.at({1}), 4.5397868702434395e-05, 1e-15));
  });

  v.run("softmax flattens at huge temperature", [&] {
    TensorD x = TensorD::from_data({2}, {3.0, -1.0});
    TensorD y = softmax(x, 1e6);
    v.check("softmax flattens at huge temperature",
            near_abs(y.at({0}), 0.5, 1e-4) && near_abs(y.at({1}), 0.5, 1e-4));
  });

  v.expect_throw<ConfigError>("softmax rejects temperature <= 0",
                              [] { softmax(TensorD::ones({2}), 0.0); });

  v.run("KL non-negativity", [&] {
    const double sign = v.options().fault_flip_kl_sign ? -1.0 : 1.0;
    bool ok = true;
    double worst = 0;
    for (int trial = 0; trial < 1000 && ok; ++trial) {
      TensorD p = softmax(TensorD::randn({1, 6}, rng, 2.0), 1.0);
      TensorD q = softmax(TensorD::randn({1, 6}, rng, 2.0), 1.0);
      const double kl = sign * kl_divergence(p, q).at({0});
      worst = std::min(worst, kl);
      ok = ok && kl >= 0.0;
    }
    v.check("KL non-negativity", ok,
            "minimum divergence " + std::to_string(worst));
  });

  v.run("KL of identical logits is exactly zero", [&] {
    TensorD logits = TensorD::randn({3, 5}, rng, 2.0);
    TensorD kl = kl_from_logits(logits, logits);
    bool ok = true;
    for (std::int64_t i = 0; i < kl.numel(); ++i) ok = ok && kl.data()[i] == 0.0;
    v.check("KL of identical logits is exactly zero", ok);
  });

  v.run("KL frozen hand value", [&] {
    TensorD p = TensorD::from_data({2}, {0.75, 0.25});
    TensorD q = TensorD::from_data({2}, {0.5, 0.5});
    const double expect = 0.75 * std::log(1.5) + 0.25 * std::log(0.5);
    v.check("KL frozen hand value",
            near_abs(kl_divergence(p, q).item(), expect, 1e-12));
  });

  v.expect_throw<ContractError>("KL rejects unnormalized input", [] {
    kl_divergence(TensorD::from_data({2}, {0.9, 0.9}),
                  TensorD::from_data({2}, {0.5, 0.5}));
  });

  v.run("layer_norm behaviors", [&] {
    TensorD gamma = TensorD::ones({4});
    TensorD beta = TensorD::zeros({4});
    TensorD cst = TensorD::full({1, 4}, 3.25);
    TensorD zeroed = layer_norm(cst, gamma, beta, 1e-6);
    bool ok = true;
    for (std::int64_t j = 0; j < 4; ++j)
      ok = ok && std::abs(zeroed.at({0, j})) < 1e-3;
    TensorD pm = layer_norm(TensorD::from_data({1, 2}, {1.0, -1.0}),
                            TensorD::ones({2}), TensorD::zeros({2}), 1e-12);
    ok = ok && near_abs(pm.at({0, 0}), 1.0, 1e-5) &&
         near_abs(pm.at({0, 1}), -1.0, 1e-5);
    TensorD bias = layer_norm(TensorD::randn({2, 4}, rng), TensorD::zeros({4}),
                              TensorD::full({4}, 0.7), 1e-6);
    for (std::int64_t i = 0; i < bias.numel(); ++i)
      ok = ok && bias.data()[i] == 0.7;
    v.check("layer_norm behaviors", ok);
  });

  v.run("matmul identities and hand product", [&] {
    TensorD a = TensorD::randn({3, 3}, rng);
    TensorD eye = TensorD::zeros({3, 3});
    for (int i = 0; i < 3; ++i) eye.at({i, i}) = 1.0;
    TensorD ia = matmul(eye, a);
    bool ok = true;
    for (std::int64_t i = 0; i < 9; ++i)
      ok = ok && near_abs(ia.data()[i], a.data()[i], 1e-12);
    TensorD za = matmul(a, TensorD::zeros({3, 2}));
    for (std::int64_t i = 0; i < za.numel(); ++i) ok = ok && za.data()[i] == 0.0;
    TensorD lhs = TensorD::from_data({2, 2}, {1, 2, 3, 4});
    TensorD rhs = TensorD::from_data({2, 1}, {5, 6});
    TensorD prod = matmul(lhs, rhs);
    ok = ok && prod.at({0, 0}) == 17.0 && prod.at({1, 0}) == 39.0;
    v.check("matmul identities and hand product", ok);
  });

  v.expect_throw<DimensionError>("matmul names mismatched shapes", [] {
    matmul(TensorD::ones({2, 3}), TensorD::ones({4, 2}));
  });

  v.run("cosine identities", [&] {
    TensorD a = TensorD::randn({5, 6}, rng);
    TensorD one = cosine_similarity(a, a);
    bool ok = true;
    for (std::int64_t i = 0; i < one.numel(); ++i)
      ok = ok && near_abs(one.data()[i], 1.0, 1e-12);
    TensorD u = TensorD::from_data({1, 2}, {1.0, 0.0});
    TensorD w = TensorD::from_data({1, 2}, {0.0, 2.5});
    ok = ok && near_abs(cosine_similarity(u, w).at({0}), 0.0, 1e-15);
    TensorD b = TensorD::randn({5, 6}, rng);
    TensorD cs = cosine_similarity(a, b);
    TensorD cs2 = cosine_similarity(scale(a, 3.7), b);
    for (std::int64_t i = 0; i < cs.numel(); ++i)
      ok = ok && near_abs(cs.data()[i], cs2.data()[i], 1e-12);
    v.check("cosine identities", ok);
  });

  v.run("backward on simple reductions", [&] {
    TensorD x = TensorD::randn({3, 4}, rng);
    x.set_requires_grad(true);
    bool ok = true;
    {
      x.zero_grad();
      Tape<D> tape;
      Tape<D>::Scope scope(tape);
      TensorD loss = sum_all(x);
      tape.backward(loss);
      for (const auto& g : x.grad()) ok = ok && g == 1.0;
    }
    {
      x.zero_grad();
      Tape<D> tape;
      Tape<D>::Scope scope(tape);
      TensorD loss = scale(sum_all(mul(x, x)), 0.5);
      tape.backward(loss);
      for (std::int64_t i = 0; i < x.numel(); ++i)
        ok = ok && near_abs(x.grad()[static_cast<std::size_t>(i)],
                            x.data()[i], 1e-12);
    }
    v.check("backward on simple reductions", ok);
  });

  v.run("finite-difference agreement on composite graphs", [&] {
    TensorD x = TensorD::randn({4, 3}, rng);
    TensorD w1 = TensorD::randn({3, 5}, rng, 0.5);
    TensorD b1 = TensorD::randn({5}, rng, 0.1);
    TensorD w2 = TensorD::randn({5, 4}, rng, 0.5);
    TensorD b2 = TensorD::randn({4}, rng, 0.1);
    TensorD target = TensorD::randn({4, 4}, rng);
    for (auto* t : {&x, &w1, &b1, &w2, &b2}) t->set_requires_grad(true);
    auto loss_fn = [&]() {
      TensorD h = gelu(linear(x, w1, b1));
      TensorD logits = linear(h, w2, b2);
      TensorD gate = softmax(logits, 0.7);
      TensorD kl = kl_from_logits(logits, target);
      return add(sum_all(kl), sum_all(mul(gate, gate)));
    };
    auto report = grad_check<D>(
        loss_fn, {{"x", x}, {"w1", w1}, {"b1", b1}, {"w2", w2}, {"b2", b2}});
    v.check("finite-difference agreement on composite graphs",
            report.ok(1e-4),
            "max rel err " + std::to_string(report.max_rel_err));
  });

  v.run("forward ops stay finite on random input", [&] {
    bool ok = true;
    for (int trial = 0; trial < 50; ++trial) {
      TensorD a = TensorD::randn({3, 6}, rng, 10.0);
      TensorD b = TensorD::randn({3, 6}, rng, 10.0);
      (void)gelu(a);
      (void)softmax(a, 0.1);
      (void)log_softmax(a);
      (void)cosine_similarity(a, b);
      (void)layer_norm(a, TensorD::ones({6}), TensorD::zeros({6}), 1e-6);
    }
    v.check("forward ops stay finite on random input", ok);
  });
}

// --------------------------------------------------------------- encoder

inline void check_encoder(VerifyContext& v) {
  Rng rng(402);

  v.run("patchify round trip and counts", [&] {
    TensorD img = TensorD::randn({2, 3, 8, 8}, rng);
    TensorD patches = patchify(img, 4);
    bool ok = patches.shape() == Shape{2, 4, 48};
    TensorD back = unpatchify(patches, 4, 3);
    for (std::int64_t i = 0; i < img.numel(); ++i)
      ok = ok && back.data()[i] == img.data()[i];
    TensorD whole = patchify(TensorD::randn({1, 3, 4, 4}, rng), 4);
    ok = ok && whole.shape() == Shape{1, 1, 48};
    ViTConfig paper;
    paper.image_size = 224;
    paper.patch_size = 16;
    ok = ok && paper.num_patches() == 196;
    v.check("patchify round trip and counts", ok);
  });

  v.expect_throw<ConfigError>("patchify rejects indivisible sizes", [&] {
    patchify(TensorD::ones({1, 3, 10, 10}), 4);
  });

  ViTConfig tiny;
  tiny.image_size = 8;
  tiny.patch_size = 4;
  tiny.in_channels = 3;
  tiny.embed_dim = 6;
  tiny.depth = 1;
  tiny.num_heads = 2;

  v.run("embed offsets and zero cases", [&] {
    ViTEncoder<D> enc(tiny, rng);
    auto params = enc.named_params("");
    auto find = [&](const std::string& name) -> TensorD {
      for (auto& [n, t] : params)
        if (n == name) return t;
      throw ContractError("missing " + name);
    };
    for (const auto& [n, t] : params) {
      TensorD alias = t;
      std::fill(alias.vec().begin(), alias.vec().end(), 0.0);
    }
    TensorD zeros_out = enc.embed(TensorD::zeros({1, 4, 48}));
    bool ok = true;
    for (std::int64_t i = 0; i < zeros_out.numel(); ++i)
      ok = ok && zeros_out.data()[i] == 0.0;
    TensorD pos = find("pos");
    Rng prng(7);
    for (auto& pv : pos.vec()) pv = prng.gaussian();
    TensorD posed = enc.embed(TensorD::randn({1, 4, 48}, rng));
    for (std::int64_t nn = 0; nn < 5; ++nn)
      for (std::int64_t dd = 0; dd < 6; ++dd)
        ok = ok && posed.at({0, nn, dd}) == pos.at({nn, dd});
    v.check("embed offsets and zero cases", ok);
  });

  v.run("depth-0 forward is the final norm", [&] {
    ViTConfig flat = tiny;
    flat.depth = 0;
    ViTEncoder<D> enc(flat, rng);
    TensorD tokens = TensorD::randn({2, 5, 6}, rng);
    TensorD out = enc.forward(tokens);
    auto params = enc.named_params("");
    TensorD g, b;
    for (auto& [n, t] : params) {
      if (n == "final_norm.g") g = t;
      if (n == "final_norm.b") b = t;
    }
    TensorD ref = layer_norm(tokens, g, b, kLayerNormEps);
    bool ok = true;
    for (std::int64_t i = 0; i < out.numel(); ++i)
      ok = ok && out.data()[i] == ref.data()[i];
    v.check("depth-0 forward is the final norm", ok);
  });

  v.run("patch permutation equivariance", [&] {
    ViTEncoder<D> enc(tiny, rng);
    TensorD patches = TensorD::randn({1, 4, 48}, rng);
    TensorD base = enc.forward(enc.embed(patches));

    TensorD swapped = patches.clone_data();
    for (std::int64_t dd = 0; dd < 48; ++dd)
      std::swap(swapped.at({0, 1, dd}), swapped.at({0, 2, dd}));
    auto params = enc.named_params("");
    TensorD pos;
    for (auto& [n, t] : params)
      if (n == "pos") pos = t;
    std::vector<double> saved = pos.vec();
    for (std::int64_t dd = 0; dd < 6; ++dd)
      std::swap(pos.at({2, dd}), pos.at({3, dd}));  // pos rows 1+1, 1+2
    TensorD moved = enc.forward(enc.embed(swapped));
    pos.vec() = saved;

    bool ok = true;
    for (std::int64_t dd = 0; dd < 6; ++dd) {
      ok = ok && near_abs(base.at({0, 2, dd}), moved.at({0, 3, dd}), 1e-12);
      ok = ok && near_abs(base.at({0, 3, dd}), moved.at({0, 2, dd}), 1e-12);
      ok = ok && near_abs(base.at({0, 0, dd}), moved.at({0, 0, dd}), 1e-12);
    }
    v.check("patch permutation equivariance", ok);
  });

  v.run("single-block forward matches straight-line oracle", [&] {
    ViTConfig micro;
    micro.image_size = 2;
    micro.patch_size = 1;
    micro.in_channels = 1;
    micro.embed_dim = 2;
    micro.depth = 1;
    micro.num_heads = 1;
    micro.mlp_ratio = 2.0;
    ViTEncoder<D> enc(micro, rng);
    TensorD tokens = TensorD::randn({1, 5, 2}, rng);
    TensorD out = enc.forward(tokens);

    auto params = enc.named_params("");
    auto get = [&](const std::string& name) -> TensorD {
      for (auto& [n, t] : params)
        if (n == name) return t;
      throw ContractError("missing " + name);
    };
    const std::int64_t s = 5, dd = 2, hh = 4;
    auto ln = [&](std::vector<double>& rows, const TensorD& g, const TensorD& b) {
      for (std::int64_t r = 0; r < s; ++r) {
        double mean = 0, var = 0;
        for (std::int64_t j = 0; j < dd; ++j) mean += rows[r * dd + j];
        mean /= dd;
        for (std::int64_t j = 0; j < dd; ++j) {
          const double c = rows[r * dd + j] - mean;
          var += c * c;
        }
        var /= dd;
        const double rs = 1.0 / std::sqrt(var + 1e-6);
        for (std::int64_t j = 0; j < dd; ++j)
          rows[r * dd + j] = g.at({j}) * (rows[r * dd + j] - mean) * rs + b.at({j});
      }
    };
    auto affine = [&](const std::vector<double>& rows, const TensorD& w,
                      const TensorD& b, std::int64_t in, std::int64_t outd) {
      std::vector<double> y(static_cast<std::size_t>(s * outd), 0.0);
      for (std::int64_t r = 0; r < s; ++r)
        for (std::int64_t o = 0; o < outd; ++o) {
          double acc = b.at({o});
          for (std::int64_t i2 = 0; i2 < in; ++i2)
            acc += rows[r * in + i2] * w.at({i2, o});
          y[r * outd + o] = acc;
        }
      return y;
    };

    std::vector<double> x(tokens.vec());
    std::vector<double> h(x);
    ln(h, get("block0.ln1.g"), get("block0.ln1.b"));
    auto q = affine(h, get("block0.attn.wq"), get("block0.attn.bq"), dd, dd);
    auto kk = affine(h, get("block0.attn.wk"), get("block0.attn.bk"), dd, dd);
    auto vv = affine(h, get("block0.attn.wv"), get("block0.attn.bv"), dd, dd);
    std::vector<double> ctx(static_cast<std::size_t>(s * dd), 0.0);
    for (std::int64_t i = 0; i < s; ++i) {
      std::vector<double> row(static_cast<std::size_t>(s));
      double mx = -1e300;
      for (std::int64_t j = 0; j < s; ++j) {
        double dot = 0;
        for (std::int64_t c = 0; c < dd; ++c)
          dot += q[i * dd + c] * kk[j * dd + c];
        row[static_cast<std::size_t>(j)] = dot / std::sqrt(2.0);
        mx = std::max(mx, row[static_cast<std::size_t>(j)]);
      }
      double denom = 0;
      for (auto& rv : row) {
        rv = std::exp(rv - mx);
        denom += rv;
      }
      for (std::int64_t j = 0; j < s; ++j)
        for (std::int64_t c = 0; c < dd; ++c)
          ctx[i * dd + c] += (row[static_cast<std::size_t>(j)] / denom) *
                             vv[j * dd + c];
    }
    auto attn_out = affine(ctx, get("block0.attn.wo"), get("block0.attn.bo"),
                           dd, dd);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn_out[i];
    std::vector<double> h2(x);
    ln(h2, get("block0.ln2.g"), get("block0.ln2.b"));
    auto m1 = affine(h2, get("block0.mlp.w1"), get("block0.mlp.b1"), dd, hh);
    for (auto& mv : m1)
      mv = 0.5 * mv * (1.0 + std::erf(mv * 0.7071067811865475244));
    auto m2 = affine(m1, get("block0.mlp.w2"), get("block0.mlp.b2"), hh, dd);
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += m2[i];
    ln(x, get("final_norm.g"), get("final_norm.b"));

    bool ok = true;
    for (std::int64_t i = 0; i < out.numel(); ++i)
      ok = ok && near_abs(out.data()[i], x[static_cast<std::size_t>(i)], 1e-12);
    v.check("single-block forward matches straight-line oracle", ok);
  });

  v.run("every student parameter receives gradient", [&] {
    ViTEncoder<D> enc(tiny, rng);
    TensorD patches = TensorD::randn({2, 4, 48}, rng);
    Tape<D> tape;
    Tape<D>::Scope scope(tape);
    TensorD out = enc.forward(enc.embed(patches));
    TensorD loss = sum_all(mul(out, out));
    tape.backward(loss);
    bool ok = true;
    std::string missing;
    for (const auto& [name, p] : enc.named_params("")) {
      const auto& g = p.grad_or_empty();
      bool any = false;
      for (double gv : g) any = any || gv != 0.0;
      if (!any) {
        ok = false;
        missing = name;
      }
    }
    v.check("every student parameter receives gradient", ok,
            "zero gradient on " + missing);
  });
}

// --------------------------------------------------------------- masking

inline void check_masking(VerifyContext& v) {
  MaskSpec spec;

  v.run("mask determinism and counts", [&] {
    auto a = sample_mask_set<D>(4, 64, spec, 99);
    auto b = sample_mask_set<D>(4, 64, spec, 99);
    bool ok = true;
    for (std::int64_t i = 0; i < a.student.numel(); ++i)
      ok = ok && a.student.data()[i] == b.student.data()[i];
    for (std::size_t m = 0; m < a.teachers.size(); ++m)
      for (std::int64_t i = 0; i < a.teachers[m].numel(); ++i)
        ok = ok && a.teachers[m].data()[i] == b.teachers[m].data()[i];
    auto kept = [&](const TensorD& mask, std::int64_t row) {
      std::int64_t c = 0;
      for (std::int64_t j = 1; j < mask.dim(1); ++j)
        c += mask.at({row, j}) == 1.0 ? 1 : 0;
      return c;
    };
    for (std::int64_t r = 0; r < 4; ++r) {
      ok = ok && a.student.at({r, 0}) == 1.0;
      ok = ok && kept(a.student, r) == kept_count(0.75, 64);
      for (std::size_t m = 0; m < a.teachers.size(); ++m) {
        ok = ok && a.teachers[m].at({r, 0}) == 1.0;
        ok = ok && kept(a.teachers[m], r) ==
                       kept_count(spec.r_teachers[m], 64);
      }
    }
    ok = ok && kept_count(0.75, 196) == 49;
    MaskSpec all;
    all.r_student = 0.5;
    all.r_teachers = {0.0};
    auto c = sample_mask_set<D>(1, 10, all, 1);
    ok = ok && kept(c.teachers[0], 0) == 10;
    v.check("mask determinism and counts", ok);
  });

  v.expect_throw<ConfigError>("mask rejects student ratio <= teacher ratio",
                              [] {
                                MaskSpec bad;
                                bad.r_student = 0.4;
                                bad.r_teachers = {0.5, 0.4, 0.3};
                                bad.validate();
                              });

  v.run("mask keep frequency is uniform", [&] {
    const std::int64_t n = 16;
    MaskSpec half;
    half.r_student = 0.5;
    half.r_teachers = {0.25};
    std::vector<std::int64_t> keep(static_cast<std::size_t>(n), 0);
    const std::int64_t draws = 100000;
    auto set = sample_mask_set<D>(draws, n, half, 12345);
    for (std::int64_t r = 0; r < draws; ++r)
      for (std::int64_t j = 0; j < n; ++j)
        keep[static_cast<std::size_t>(j)] +=
            set.student.at({r, j + 1}) == 1.0 ? 1 : 0;
    bool ok = true;
    for (std::int64_t j = 0; j < n; ++j) {
      const double freq = static_cast<double>(keep[static_cast<std::size_t>(j)]) /
                          static_cast<double>(draws);
      ok = ok && std::abs(freq - 0.5) < 0.01;
    }
    v.check("mask keep frequency is uniform", ok);
  });

  v.run("mask streams are pairwise independent", [&] {
    const std::int64_t n = 64;
    const std::int64_t draws = 1000;
    auto set = sample_mask_set<D>(draws, n, spec, 777);
    auto mean_overlap = [&](const TensorD& x, const TensorD& y) {
      double total = 0;
      for (std::int64_t r = 0; r < draws; ++r)
        for (std::int64_t j = 1; j <= n; ++j)
          total += (x.at({r, j}) == 1.0 && y.at({r, j}) == 1.0) ? 1.0 : 0.0;
      return total / static_cast<double>(draws);
    };
    auto expect_sigma = [&](double r1, double r2) {
      const double k1 = static_cast<double>(kept_count(r1, n));
      const double k2 = static_cast<double>(kept_count(r2, n));
      const double mean = k1 * k2 / static_cast<double>(n);
      const double var = k1 * k2 * (n - k1) * (n - k2) /
                         (static_cast<double>(n) * n * (n - 1));
      return std::pair<double, double>(mean,
                                       std::sqrt(var / static_cast<double>(draws)));
    };
    bool ok = true;
    std::string detail;
    struct Pair {
      const TensorD* x;
      const TensorD* y;
      double r1, r2;
    };
    std::vector<Pair> pairs{{&set.teachers[0], &set.teachers[1], 0.50, 0.40},
                            {&set.teachers[0], &set.teachers[2], 0.50, 0.30},
                            {&set.teachers[1], &set.teachers[2], 0.40, 0.30},
                            {&set.student, &set.teachers[0], 0.75, 0.50}};
    for (const auto& pr : pairs) {
      const auto [mean, sigma] = expect_sigma(pr.r1, pr.r2);
      const double got = mean_overlap(*pr.x, *pr.y);
      if (std::abs(got - mean) > 3.0 * sigma) {
        ok = false;
        detail = "overlap " + std::to_string(got) + " expected " +
                 std::to_string(mean) + " +- " + std::to_string(3.0 * sigma);
      }
    }
    v.check("mask streams are pairwise independent", ok, detail);
  });

  v.run("apply_mask zeroes exactly the masked rows", [&] {
    TensorD tokens = TensorD::from_data(
        {1, 3, 2}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    TensorD mask = TensorD::from_data({1, 3}, {1.0, 0.0, 1.0});
    TensorD out = apply_mask(tokens, mask);
    bool ok = out.at({0, 0, 0}) == 1.0 && out.at({0, 0, 1}) == 2.0 &&
              out.at({0, 1, 0}) == 0.0 && out.at({0, 1, 1}) == 0.0 &&
              out.at({0, 2, 0}) == 5.0 && out.at({0, 2, 1}) == 6.0;
    TensorD ones = TensorD::ones({1, 3});
    TensorD same = apply_mask(tokens, ones);
    for (std::int64_t i = 0; i < tokens.numel(); ++i)
      ok = ok && same.data()[i] == tokens.data()[i];
    v.check("apply_mask zeroes exactly the masked rows", ok);
  });

  v.expect_throw<ContractError>("apply_mask rejects non-binary masks", [] {
    apply_mask(TensorD::ones({1, 2, 2}),
               TensorD::from_data({1, 2}, {1.0, 0.5}));
  });
}

// --------------------------------------------------------------- adapter

inline void check_adapter(VerifyContext& v) {
  Rng rng(403);

  v.run("adapter normalization statistics", [&] {
    Adapter<D> ad(12, 8, rng);
    // Large token scale keeps the pre-normalization variance well above the
    // normalizer's epsilon, so the unit-variance check is sharp at 1e-5.
    TensorD tokens = TensorD::randn({2, 5, 12}, rng, 100.0);
    TensorD out = ad.adapt(tokens);
    bool ok = out.shape() == Shape{2, 5, 8};
    for (std::int64_t i = 0; i < 2 * 5; ++i) {
      double mean = 0, var = 0;
      for (std::int64_t j = 0; j < 8; ++j) mean += out.data()[i * 8 + j];
      mean /= 8;
      for (std::int64_t j = 0; j < 8; ++j) {
        const double c = out.data()[i * 8 + j] - mean;
        var += c * c;
      }
      var /= 8;
      ok = ok && std::abs(mean) < 1e-5 && std::abs(var - 1.0) < 1e-5;
    }
    v.check("adapter normalization statistics", ok);
  });

  v.run("identity-projection adapter equals plain LayerNorm", [&] {
    Adapter<D> ad(4, 4, rng);
    auto params = ad.named_params("");
    for (auto& [n, t] : params) {
      TensorD alias = t;
      if (n == "w") {
        std::fill(alias.vec().begin(), alias.vec().end(), 0.0);
        for (int i = 0; i < 4; ++i) alias.at({i, i}) = 1.0;
      } else if (n == "norm.g") {
        std::fill(alias.vec().begin(), alias.vec().end(), 1.0);
      } else {
        std::fill(alias.vec().begin(), alias.vec().end(), 0.0);
      }
    }
    TensorD tokens = TensorD::randn({1, 3, 4}, rng);
    TensorD out = ad.adapt(tokens);
    TensorD ref = layer_norm(tokens, TensorD::ones({4}), TensorD::zeros({4}),
                             kLayerNormEps);
    bool ok = true;
    for (std::int64_t i = 0; i < out.numel(); ++i)
      ok = ok && near_abs(out.data()[i], ref.data()[i], 1e-12);
    v.check("identity-projection adapter equals plain LayerNorm", ok);
  });

  v.run("gradient reaches the adapter, never the frozen teacher", [&] {
    ViTConfig tcfg;
    tcfg.image_size = 8;
    tcfg.patch_size = 4;
    tcfg.embed_dim = 6;
    tcfg.depth = 1;
    tcfg.num_heads = 2;
    ViTEncoder<D> teacher(tcfg, rng);
    teacher.set_frozen(true);
    Adapter<D> ad(6, 4, rng);
    TensorD patches = TensorD::randn({1, 4, 48}, rng);
    Tape<D> tape;
    Tape<D>::Scope scope(tape);
    TensorD z = teacher.forward(teacher.embed(patches));
    TensorD out = ad.adapt(z);
    TensorD loss = sum_all(mul(out, out));
    tape.backward(loss);
    bool adapter_has = true;
    for (const auto& [n, p] : ad.named_params("")) {
      bool any = false;
      for (double gv : p.grad_or_empty()) any = any || gv != 0.0;
      adapter_has = adapter_has && any;
    }
    bool teacher_clean = true;
    for (const auto& [n, p] : teacher.named_params(""))
      teacher_clean = teacher_clean && p.grad_or_empty().empty();
    v.check("gradient reaches the adapter, never the frozen teacher",
            adapter_has && teacher_clean);
  });
}

// ---------------------------------------------------------------- gating

inline void check_gating(VerifyContext& v) {
  Rng rng(404);
  GatingConfig gcfg;

  v.run("gating weight algebra on random instances", [&] {
    bool ok = true;
    std::string detail;
    for (int trial = 0; trial < 2000 && ok; ++trial) {
      const std::int64_t b = 1 + static_cast<std::int64_t>(rng.uniform_below(2));
      const std::int64_t n = 2 + static_cast<std::int64_t>(rng.uniform_below(4));
      const std::size_t m = 1 + rng.uniform_below(5);
      TensorD student = TensorD::randn({b, n, 4}, rng);
      std::vector<TensorD> adapted;
      for (std::size_t j = 0; j < m; ++j)
        adapted.push_back(TensorD::randn({b, n, 4}, rng));
      auto res = gate_tokens(student, adapted, gcfg);
      for (std::int64_t r = 0; r < b * n; ++r) {
        double sum = 0;
        for (std::size_t j = 0; j < m; ++j)
          sum += res.alpha.data()[r * static_cast<std::int64_t>(m) +
                                  static_cast<std::int64_t>(j)];
        if (std::abs(sum - 1.0) > 1e-6) {
          ok = false;
          detail = "row sum " + std::to_string(sum);
        }
      }
      if (m >= 2) {
        std::vector<TensorD> rotated(adapted.begin() + 1, adapted.end());
        rotated.push_back(adapted[0]);
        auto res2 = gate_tokens(student, rotated, gcfg);
        for (std::int64_t r = 0; r < b * n && ok; ++r)
          for (std::size_t j = 0; j < m; ++j) {
            const double lhs =
                res.alpha.data()[r * static_cast<std::int64_t>(m) +
                                 static_cast<std::int64_t>(j)];
            const double rhs =
                res2.alpha.data()[r * static_cast<std::int64_t>(m) +
                                  static_cast<std::int64_t>((j + m - 1) % m)];
            if (std::abs(lhs - rhs) > 1e-9) {
              ok = false;
              detail = "permutation equivariance broke";
            }
          }
        std::vector<TensorD> scaled = adapted;
        scaled[0] = scale(adapted[0], 2.5);
        auto res3 = gate_tokens(student, scaled, gcfg);
        for (std::int64_t i = 0; i < res.alpha.numel() && ok; ++i)
          if (std::abs(res.alpha.data()[i] - res3.alpha.data()[i]) > 1e-9) {
            ok = false;
            detail = "scale invariance broke";
          }
      }
    }
    v.check("gating weight algebra on random instances", ok, detail);
  });

  v.run("outlier teacher is down-weighted", [&] {
    bool ok = true;
    for (int trial = 0; trial < 200 && ok; ++trial) {
      TensorD t = TensorD::randn({1, 1, 6}, rng);
      std::vector<TensorD> adapted{t.clone_data(), t.clone_data(),
                                   scale(t, -1.0)};
      auto res = gate_tokens(t, adapted, gcfg);
      const double third = 1.0 / 3.0;
      ok = ok && res.alpha.at({0, 0, 0}) > third &&
           res.alpha.at({0, 0, 1}) > third && res.alpha.at({0, 0, 2}) < third;
    }
    v.check("outlier teacher is down-weighted", ok);
  });

  v.run("gating frozen softmax value and shift invariance", [&] {
    TensorD s = TensorD::from_data({1, 1, 2}, {1.0, 0.0});
    TensorD c = TensorD::zeros({1, 1, 2});
    auto res = gate(s, c, gcfg);
    bool ok = near_abs(res.alpha.at({0, 0, 0}), 0.9999546021312976, 1e-12) &&
              near_abs(res.alpha.at({0, 0, 1}), 4.5397868702434395e-05, 1e-15);
    TensorD shifted = TensorD::from_data({1, 1, 2}, {1.7, 0.7});
    auto res2 = gate(shifted, c, gcfg);
    ok = ok && near_abs(res2.alpha.at({0, 0, 0}), res.alpha.at({0, 0, 0}), 1e-9);
    v.check("gating frozen softmax value and shift invariance", ok);
  });

  v.run("degenerate and symmetric teacher counts", [&] {
    TensorD student = TensorD::randn({1, 2, 4}, rng);
    std::vector<TensorD> one{TensorD::randn({1, 2, 4}, rng)};
    auto res1 = gate_tokens(student, one, gcfg);
    bool ok = true;
    for (std::int64_t i = 0; i < res1.alpha.numel(); ++i)
      ok = ok && res1.alpha.data()[i] == 1.0 && res1.c.data()[i] == 0.0;
    std::vector<TensorD> two{TensorD::randn({1, 2, 4}, rng),
                             TensorD::randn({1, 2, 4}, rng)};
    auto res2 = gate_tokens(student, two, gcfg);
    for (std::int64_t r = 0; r < 2; ++r)
      ok = ok && near_abs(res2.c.at({0, r, 0}), res2.c.at({0, r, 1}), 1e-12);
    std::vector<TensorD> same{two[0], two[0].clone_data(), two[0].clone_data()};
    auto res3 = gate_tokens(student, same, gcfg);
    for (std::int64_t i = 0; i < res3.c.numel(); ++i)
      ok = ok && near_abs(res3.c.data()[i], 1.0, 1e-9);
    v.check("degenerate and symmetric teacher counts", ok);
  });

  v.run("uniform variant reproduces mean fusion", [&] {
    GatingConfig ucfg;
    ucfg.variant = GatingVariant::uniform;
    TensorD student = TensorD::randn({2, 3, 4}, rng);
    std::vector<TensorD> adapted{TensorD::randn({2, 3, 4}, rng),
                                 TensorD::randn({2, 3, 4}, rng),
                                 TensorD::randn({2, 3, 4}, rng)};
    auto res = gate_tokens(student, adapted, ucfg);
    bool ok = true;
    for (std::int64_t i = 0; i < res.alpha.numel(); ++i)
      ok = ok && res.alpha.data()[i] == 1.0 / 3.0;
    TensorD fused = fuse(res.alpha, adapted);
    for (std::int64_t i = 0; i < fused.numel(); ++i) {
      const double mean = (adapted[0].data()[i] + adapted[1].data()[i] +
                           adapted[2].data()[i]) / 3.0;
      ok = ok && near_abs(fused.data()[i], mean, 1e-13);
    }
    v.check("uniform variant reproduces mean fusion", ok);
  });

  v.expect_throw<ConfigError>("gating rejects bad temperature", [] {
    GatingConfig bad;
    bad.temperature = 0.0;
    bad.validate();
  });
}

// ------------------------------------------------------------ distillation

inline void check_distill(VerifyContext& v) {
  Rng rng(405);

  v.run("fusion respects one-hot and convexity", [&] {
    std::vector<TensorD> adapted{TensorD::randn({1, 3, 4}, rng),
                                 TensorD::randn({1, 3, 4}, rng),
                                 TensorD::randn({1, 3, 4}, rng)};
    TensorD onehot = TensorD::zeros({1, 3, 3});
    for (std::int64_t r = 0; r < 3; ++r) onehot.at({0, r, 1}) = 1.0;
    TensorD fused = fuse(onehot, adapted);
    bool ok = true;
    for (std::int64_t i = 0; i < fused.numel(); ++i)
      ok = ok && fused.data()[i] == adapted[1].data()[i];

    TensorD weights = softmax(TensorD::randn({1, 3, 3}, rng), 1.0);
    TensorD mix = fuse(weights, adapted);
    for (std::int64_t r = 0; r < 3; ++r)
      for (std::int64_t d = 0; d < 4; ++d) {
        double lo = 1e300, hi = -1e300;
        for (auto& a : adapted) {
          lo = std::min(lo, a.at({0, r, d}));
          hi = std::max(hi, a.at({0, r, d}));
        }
        const double got = mix.at({0, r, d});
        ok = ok && got >= lo - 1e-12 && got <= hi + 1e-12;
      }

    std::vector<TensorD> single{adapted[0]};
    TensorD one = TensorD::ones({1, 3, 1});
    TensorD same = fuse(one, single);
    for (std::int64_t i = 0; i < same.numel(); ++i)
      ok = ok && same.data()[i] == adapted[0].data()[i];
    v.check("fusion respects one-hot and convexity", ok);
  });

  v.run("token loss identities", [&] {
    ProjectionHead<D> phi(4, 6, rng);
    TensorD tokens = TensorD::randn({2, 3, 4}, rng);
    TensorD mask = TensorD::from_data({2, 3}, {1, 0, 1, 1, 1, 0});
    const double zero =
        token_loss(tokens, tokens.clone_data(), mask, phi).item();
    bool ok = zero == 0.0;

    TensorD fused = TensorD::randn({2, 3, 4}, rng);
    TensorD cls_only = TensorD::zeros({2, 3});
    cls_only.at({0, 0}) = 1.0;
    cls_only.at({1, 0}) = 1.0;
    const double restricted = token_loss(tokens, fused, cls_only, phi).item();
    TensorD sl = phi.forward(tokens);
    TensorD tl = phi.forward(fused);
    double direct = 0;
    for (std::int64_t bb = 0; bb < 2; ++bb) {
      TensorD srow({1, 6}), trow({1, 6});
      for (std::int64_t j = 0; j < 6; ++j) {
        srow.at({0, j}) = sl.at({bb, 0, j});
        trow.at({0, j}) = tl.at({bb, 0, j});
      }
      direct += kl_from_logits(srow, trow).at({0});
    }
    direct /= 2.0;
    ok = ok && near(restricted, direct, 1e-12);
    ok = ok && token_loss(tokens, fused, mask, phi).item() >= 0.0;
    v.check("token loss identities", ok);
  });

  v.run("spatial loss matches brute-force enumeration", [&] {
    ProjectionHead<D> psi(3, 5, rng);
    TensorD student = TensorD::randn({1, 5, 3}, rng);  // N = 4 patches + cls
    TensorD fused = TensorD::randn({1, 5, 3}, rng);
    const double got = spatial_loss(student, fused, psi).item();
    double want = 0;
    for (std::int64_t n = 1; n <= 4; ++n) {
      TensorD srow({1, 3}), trow({1, 3});
      for (std::int64_t j = 0; j < 3; ++j) {
        srow.at({0, j}) = student.at({0, n, j});
        trow.at({0, j}) = fused.at({0, n, j});
      }
      want += kl_from_logits(psi.forward(srow), psi.forward(trow)).at({0});
    }
    want /= 4.0;
    bool ok = near(got, want, 1e-12);
    ok = ok && spatial_loss(student, student.clone_data(), psi).item() == 0.0;
    v.check("spatial loss matches brute-force enumeration", ok);
  });

  v.run("total loss variants", [&] {
    ProjectionHead<D> phi(4, 6, rng), psi(4, 6, rng);
    TensorD student = TensorD::randn({2, 5, 4}, rng);
    TensorD fused = TensorD::randn({2, 5, 4}, rng);
    TensorD mask = TensorD::ones({2, 5});
    auto dual = total_loss(student, fused, mask, phi, psi,
                           LossVariant::dual_kl);
    bool ok = dual.report.total == dual.report.l_token + dual.report.l_spatial;
    ok = ok && dual.report.l_token >= 0 && dual.report.l_spatial >= 0;
    auto token_only = total_loss(student, fused, mask, phi, psi,
                                 LossVariant::token_only);
    ok = ok && token_only.report.l_spatial == 0.0 &&
         token_only.report.total == token_only.report.l_token;
    auto spatial_only = total_loss(student, fused, mask, phi, psi,
                                   LossVariant::spatial_only);
    ok = ok && spatial_only.report.l_token == 0.0;

    const double delta = 0.35;
    TensorD offset = student.clone_data();
    for (auto& x : offset.vec()) x += delta;
    auto mse = total_loss(student, offset, mask, phi, psi,
                          LossVariant::dual_mse);
    ok = ok && near(mse.report.l_token, delta * delta, 1e-12) &&
         near(mse.report.l_spatial, delta * delta, 1e-12);
    v.check("total loss variants", ok);
  });

  v.run("gradient reaches exactly the trainable set", [&] {
    Config cfg = tiny_config();
    DistillModel<D> model(cfg);
    Dataset<D> ds = make_synthetic_dataset<D>(cfg.batch_size, cfg.data_classes,
                                              cfg.image_size, cfg.channels, 5);
    MaskSet<D> masks = model.sample_masks(cfg.batch_size, 21);
    Tape<D> tape;
    Tape<D>::Scope scope(tape);
    auto out = model.forward_step(ds.images, ds.images, masks, 3);
    tape.backward(out.total);
    bool ok = true;
    std::string detail;
    for (const auto& [name, p] : model.trainable_params()) {
      bool any = false;
      for (double gv : p.grad_or_empty()) any = any || gv != 0.0;
      if (!any) {
        ok = false;
        detail = "no gradient on " + name;
      }
    }
    for (std::size_t k = 0; k < 3; ++k)
      for (const auto& [name, p] : model.teacher_params(k))
        if (!p.grad_or_empty().empty()) {
          ok = false;
          detail = "teacher gradient on " + name;
        }
    if (!out.gating.e.grad_or_empty().empty()) {
      ok = false;
      detail = "gating weights leaked gradient";
    }
    v.check("gradient reaches exactly the trainable set", ok, detail);
  });

  v.run("gating gradient flag controls cosine gradients", [&] {
    Config cfg = tiny_config();
    cfg.gating.differentiable = true;
    DistillModel<D> model(cfg);
    Dataset<D> ds = make_synthetic_dataset<D>(cfg.batch_size, cfg.data_classes,
                                              cfg.image_size, cfg.channels, 5);
    MaskSet<D> masks = model.sample_masks(cfg.batch_size, 21);
    Tape<D> tape;
    Tape<D>::Scope scope(tape);
    auto out = model.forward_step(ds.images, ds.images, masks, 3);
    tape.backward(out.total);
    bool any = false;
    for (double gv : out.gating.e.grad_or_empty()) any = any || gv != 0.0;
    v.check("gating gradient flag controls cosine gradients", any,
            "no gradient reached the combined scores");
  });

  v.run("composed loss agrees with finite differences", [&] {
    Config cfg = tiny_config();
    DistillModel<D> model(cfg);
    Dataset<D> ds = make_synthetic_dataset<D>(cfg.batch_size, cfg.data_classes,
                                              cfg.image_size, cfg.channels, 5);
    MaskSet<D> masks = model.sample_masks(cfg.batch_size, 17);
    auto params = model.trainable_params();
    // Hold the detached quantities (gating weights, target-side head
    // parameters) at their base values so the numeric probe differentiates
    // the same function as the tape.
    StopGradPins<D> pins;
    pins.alpha = model.forward_step(ds.images, ds.images, masks, 3)
                     .gating.alpha.clone_data();
    ProjectionHead<D> phi_pin = model.phi().snapshot();
    ProjectionHead<D> psi_pin = model.psi().snapshot();
    pins.phi = &phi_pin;
    pins.psi = &psi_pin;
    auto loss_fn = [&]() {
      return model.forward_step(ds.images, ds.images, masks, 3, &pins).total;
    };
    Rng pick(31);
    std::vector<GradCheckEntry> entries;
    for (int i = 0; i < 40; ++i) {
      const std::size_t t = pick.uniform_below(params.size());
      entries.push_back(
          {t, static_cast<std::int64_t>(
                  pick.uniform_below(static_cast<std::uint64_t>(
                      params[t].second.numel())))});
    }
    // eps 3e-6: the attention softmax at this scale has third derivatives
    // large enough that the default 1e-5 step leaves ~1.7e-4 truncation
    // error; the quadratic term shrinks 11x here while roundoff stays ~1e-7.
    auto report = grad_check_entries<D>(loss_fn, params, entries, 3e-6);
    v.check("composed loss agrees with finite differences", report.ok(1e-4),
            "max rel err " + std::to_string(report.max_rel_err));
  });
}

// ---------------------------------------------------------------- training

inline void check_training(VerifyContext& v) {
  v.run("learning-rate schedule endpoints", [&] {
    const double peak = 1.5e-4;
    bool ok = lr_at(0, 300, peak, 0.05) == 0.0;
    ok = ok && near(lr_at(15, 300, peak, 0.05), peak, 1e-12);
    ok = ok && near_abs(lr_at(300, 300, peak, 0.05), 0.0, 1e-18);
    ok = ok && lr_at(150, 300, peak, 0.05) < peak;
    v.check("learning-rate schedule endpoints", ok);
  });

  v.run("optimizer matches a reference implementation", [&] {
    Rng rng(406);
    const double lr = 1e-3, wd = 0.05, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    // Rank 2 so the decay path is exercised (vectors are decay-exempt).
    Tensor<D> p = Tensor<D>::randn({2, 3}, rng);
    p.set_requires_grad(true);
    std::vector<double> ref(p.vec().begin(), p.vec().end());
    std::vector<double> m(6, 0.0), v2(6, 0.0);
    AdamW<D> opt({{"p", p}}, wd, b1, b2);
    bool ok = true;
    for (int t = 1; t <= 25; ++t) {
      Tensor<D> g = Tensor<D>::randn({6}, rng);
      p.grad().assign(g.data(), g.data() + 6);
      opt.step(lr);
      for (int i = 0; i < 6; ++i) {
        const double gi = g.data()[i];
        m[i] = b1 * m[i] + (1 - b1) * gi;
        v2[i] = b2 * v2[i] + (1 - b2) * gi * gi;
        const double mh = m[i] / (1 - std::pow(b1, t));
        const double vh = v2[i] / (1 - std::pow(b2, t));
        ref[i] -= lr * mh / (std::sqrt(vh) + eps);
        ref[i] -= lr * wd * ref[i];
        ok = ok && near_abs(ref[i], p.data()[i], 1e-12);
      }
      p.zero_grad();
    }
    v.check("optimizer matches a reference implementation", ok);
  });

  v.run("optimizer decay behaviors on zero gradient", [&] {
    Rng rng(407);
    Tensor<D> a = Tensor<D>::randn({2, 2}, rng);
    a.set_requires_grad(true);
    const std::vector<double> before(a.vec().begin(), a.vec().end());
    AdamW<D> no_decay({{"a", a}}, 0.0, 0.9, 0.999);
    a.grad().assign(4, 0.0);
    no_decay.step(1e-3);
    bool ok = true;
    for (int i = 0; i < 4; ++i) ok = ok && a.data()[i] == before[i];
    AdamW<D> with_decay({{"a", a}}, 0.05, 0.9, 0.999);
    a.grad().assign(4, 0.0);
    with_decay.step(1e-3);
    for (int i = 0; i < 4; ++i)
      ok = ok && near(a.data()[i], before[i] * (1.0 - 1e-3 * 0.05), 1e-12);
    v.check("optimizer decay behaviors on zero gradient", ok);
  });

  v.expect_throw<NumericError>("optimizer rejects non-finite gradients", [] {
    Tensor<D> a = Tensor<D>::ones({2});
    a.set_requires_grad(true);
    AdamW<D> opt({{"a", a}}, 0.05, 0.9, 0.999);
    a.grad().assign(2, std::numeric_limits<double>::quiet_NaN());
    opt.step(1e-3);
  });

  v.run("training step is deterministic and teachers stay frozen", [&] {
    Config cfg = tiny_config();
    Trainer<D> t1(cfg, "");
    Trainer<D> t2(cfg, "");
    const auto sums_before = t1.model().teacher_checksums();
    bool ok = true;
    for (int i = 0; i < 3; ++i) {
      const LossReport a = t1.train_one_step();
      const LossReport b = t2.train_one_step();
      ok = ok && a.total == b.total && a.l_token == b.l_token &&
           a.l_spatial == b.l_spatial;
    }
    ok = ok && t1.model().teacher_checksums() == sums_before;
    auto names = t1.optimizer().param_names();
    auto params = t1.model().trainable_params();
    ok = ok && names.size() == params.size();
    for (std::size_t i = 0; i < params.size() && ok; ++i)
      ok = ok && names[i] == params[i].first;
    v.check("training step is deterministic and teachers stay frozen", ok);
  });

  v.run("checkpoint round trip and resume", [&] {
    namespace fs = std::filesystem;
    const fs::path dir = fs::temp_directory_path() / "comad_verify_ckpt";
    fs::create_directories(dir);
    const std::string path = (dir / "state.ckpt").string();

    Config cfg = tiny_config();
    Trainer<D> t1(cfg, "");
    for (int i = 0; i < 3; ++i) t1.train_one_step();
    t1.save(path);

    Checkpoint<D> ck = load_checkpoint<D>(path);
    bool ok = ck.step == 3;
    for (const auto& [name, tensor] : t1.model().trainable_params()) {
      const Tensor<D>* loaded = ck.find(name);
      ok = ok && loaded && loaded->shape() == tensor.shape();
      if (loaded)
        for (std::int64_t i = 0; i < tensor.numel(); ++i)
          ok = ok && loaded->data()[i] == tensor.data()[i];
    }

    Trainer<D> t2(cfg, "");
    t2.resume(path);
    for (int i = 0; i < 2; ++i) {
      const LossReport a = t1.train_one_step();
      const LossReport b = t2.train_one_step();
      ok = ok && a.total == b.total;
    }

    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(1);
    f.put('X');
    f.close();
    try {
      (void)load_checkpoint<D>(path);
      ok = false;
    } catch (const IoError&) {
    }
    v.check("checkpoint round trip and resume", ok);
  });

  v.run("dataset determinism and binary round trip", [&] {
    namespace fs = std::filesystem;
    Dataset<D> a = make_synthetic_dataset<D>(8, 4, 16, 3, 42);
    Dataset<D> b = make_synthetic_dataset<D>(8, 4, 16, 3, 42);
    bool ok = a.labels == b.labels;
    for (std::int64_t i = 0; i < a.images.numel(); ++i)
      ok = ok && a.images.data()[i] == b.images.data()[i];

    const fs::path dir = fs::temp_directory_path() / "comad_verify_data";
    fs::create_directories(dir);
    const std::string path = (dir / "toy.cmad").string();
    save_dataset_binary(a, path);
    Dataset<D> c = load_dataset_binary<D>(path);
    ok = ok && c.labels == a.labels && c.images.shape() == a.images.shape();
    for (std::int64_t i = 0; i < a.images.numel(); ++i) {
      const double quantized =
          std::lround(std::clamp(a.images.data()[i], 0.0, 1.0) * 255.0) / 255.0;
      ok = ok && near_abs(c.images.data()[i], quantized, 1e-12);
    }
    v.check("dataset determinism and binary round trip", ok);
  });

  v.expect_throw<ConfigError>("probe rejects single-class data", [] {
    Rng rng(1);
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 4;
    cfg.depth = 0;
    cfg.num_heads = 1;
    ViTEncoder<D> enc(cfg, rng);
    Dataset<D> ds = make_synthetic_dataset<D>(8, 1, 8, 3, 3);
    linear_probe(enc, ds, 2, 0.1, 0.5);
  });
}

}  // namespace verify_detail

// Runs every module's property suite in f64 and reports per-check status.
// Returns the number of failed checks.
inline int run_verification(const Config& cfg, const VerifyOptions& opts,
                            std::ostream& out) {
  cfg.validate();
  VerifyContext v(out, opts);
  verify_detail::check_tensor_ops(v);
  verify_detail::check_encoder(v);
  verify_detail::check_masking(v);
  verify_detail::check_adapter(v);
  verify_detail::check_gating(v);
  verify_detail::check_distill(v);
  verify_detail::check_training(v);
  out << (v.failures() == 0 ? "all " : "FAILURES: ") << v.total() - v.failures()
      << "/" << v.total() << " checks passed\n";
  return v.failures();
}

}  // namespace comad
