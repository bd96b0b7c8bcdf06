#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <vector>

#include "gdict/prng.hpp"
#include "gdict/sae.hpp"

namespace fs = std::filesystem;
using namespace gdict;

namespace {

BaselineSae make_baseline_1d(double w_enc, double b_enc, double w_dec, double b_dec) {
  BaselineSae s;
  s.d_act = 1;
  s.d_feat = 1;
  s.w_enc = Mat(1, 1);
  s.w_enc.at(0, 0) = w_enc;
  s.b_enc = {b_enc};
  s.w_dec = Mat(1, 1);
  s.w_dec.at(0, 0) = w_dec;
  s.b_dec = {b_dec};
  return s;
}

GatedSae make_gated_1d(double w_gate, double b_gate, double r_mag, double b_mag,
                       double w_dec = 1.0, double b_dec = 0.0) {
  GatedSae s;
  s.d_act = 1;
  s.d_feat = 1;
  s.tying = Tying::Tied;
  s.w_gate = Mat(1, 1);
  s.w_gate.at(0, 0) = w_gate;
  s.b_gate = {b_gate};
  s.r_mag = {r_mag};
  s.b_mag = {b_mag};
  s.w_dec = Mat(1, 1);
  s.w_dec.at(0, 0) = w_dec;
  s.b_dec = {b_dec};
  return s;
}

GatedSae random_tied_gated(std::size_t d_act, std::size_t d_feat, CounterRng& rng) {
  GatedSae s;
  s.d_act = d_act;
  s.d_feat = d_feat;
  s.tying = Tying::Tied;
  s.w_gate = Mat(d_feat, d_act);
  s.w_dec = Mat(d_feat, d_act);
  for (auto& v : s.w_gate.data) v = rng.normal();
  for (std::size_t i = 0; i < d_feat; ++i) rng.unit_sphere(s.w_dec.row_span(i));
  s.b_gate.resize(d_feat);
  s.r_mag.resize(d_feat);
  s.b_mag.resize(d_feat);
  for (auto& v : s.b_gate) v = rng.normal();
  for (auto& v : s.r_mag) v = 0.5 * rng.normal();
  for (auto& v : s.b_mag) v = rng.normal();
  s.b_dec.resize(d_act);
  for (auto& v : s.b_dec) v = rng.normal();
  return s;
}

}  // namespace

TEST_CASE("baseline encode: identity, clamp, pre-encoder bias") {
  auto s = make_baseline_1d(1.0, 0.0, 1.0, 0.0);
  REQUIRE(baseline_encode(s, Vec{1.0}).features[0] == 1.0);

  s = make_baseline_1d(1.0, -2.0, 1.0, 0.0);
  REQUIRE(baseline_encode(s, Vec{1.0}).features[0] == 0.0);

  BaselineSae t;
  t.d_act = 2;
  t.d_feat = 2;
  t.w_enc = Mat(2, 2);
  t.w_enc.at(0, 0) = 1.0;
  t.w_enc.at(1, 1) = 1.0;
  t.b_enc = {0.0, 0.0};
  t.w_dec = Mat(2, 2);
  t.w_dec.at(0, 0) = 1.0;
  t.w_dec.at(1, 1) = 1.0;
  t.b_dec = {1.0, 1.0};
  auto out = baseline_encode(t, Vec{2.0, 1.0});
  REQUIRE(out.features[0] == 1.0);
  REQUIRE(out.features[1] == 0.0);
}

TEST_CASE("decode: zero features, one-hot, linearity") {
  CounterRng rng(8);
  Mat w_dec(3, 2);
  for (auto& v : w_dec.data) v = rng.normal();
  Vec b_dec = {0.3, -0.7};

  Vec zero(3, 0.0);
  REQUIRE(decode(w_dec, b_dec, zero) == b_dec);

  Vec onehot = {0.0, 1.0, 0.0};
  Vec d = decode(w_dec, b_dec, onehot);
  REQUIRE(d[0] == Catch::Approx(b_dec[0] + w_dec.at(1, 0)));
  REQUIRE(d[1] == Catch::Approx(b_dec[1] + w_dec.at(1, 1)));

  for (int rep = 0; rep < 20; ++rep) {
    Vec f1(3), f2(3), fsum(3);
    for (std::size_t i = 0; i < 3; ++i) {
      f1[i] = rng.normal();
      f2[i] = rng.normal();
      fsum[i] = f1[i] + f2[i];
    }
    Vec lhs = decode(w_dec, b_dec, fsum);
    Vec r1 = decode(w_dec, b_dec, f1);
    Vec r2 = decode(w_dec, b_dec, f2);
    for (std::size_t k = 0; k < 2; ++k)
      REQUIRE(lhs[k] - b_dec[k] ==
              Catch::Approx((r1[k] - b_dec[k]) + (r2[k] - b_dec[k])).margin(1e-12));
  }
}

TEST_CASE("materialize_w_mag scales rows by exp(r_mag)") {
  GatedSae s = make_gated_1d(1.0, 0.0, 0.0, 0.0);
  s.w_gate = Mat(3, 2);
  s.w_dec = Mat(3, 2, 0.0);
  s.d_act = 2;
  s.d_feat = 3;
  s.w_gate.data = {0.4, 0.6, 1.0, -1.0, 2.0, 0.5};
  s.b_gate = {0, 0, 0};
  s.b_mag = {0, 0, 0};
  s.b_dec = {0, 0};
  s.r_mag = {0.0, std::log(2.0), -std::log(2.0)};
  Mat w = materialize_w_mag(s);
  REQUIRE(w.at(0, 0) == 0.4);
  REQUIRE(w.at(0, 1) == 0.6);
  REQUIRE(w.at(1, 0) == Catch::Approx(2.0));
  REQUIRE(w.at(1, 1) == Catch::Approx(-2.0));
  REQUIRE(w.at(2, 0) == Catch::Approx(1.0));
  REQUIRE(w.at(2, 1) == Catch::Approx(0.25));

  s.tying = Tying::Untied;
  s.w_mag_untied = s.w_gate;
  REQUIRE_THROWS_AS(materialize_w_mag(s), std::logic_error);
}

TEST_CASE("gated encode: open gate, closed gate, boundary is closed") {
  auto s = make_gated_1d(1.0, -1.0, 0.0, 0.0);
  auto out = gated_encode(s, Vec{2.0});
  REQUIRE(out.pre_gate[0] == 1.0);
  REQUIRE(out.gate_mask[0] == 1);
  REQUIRE(out.mag_acts[0] == 2.0);
  REQUIRE(out.features[0] == 2.0);

  out = gated_encode(s, Vec{0.5});
  REQUIRE(out.pre_gate[0] == -0.5);
  REQUIRE(out.gate_mask[0] == 0);
  REQUIRE(out.mag_acts[0] == 0.5);  // magnitude exists but is discarded
  REQUIRE(out.features[0] == 0.0);

  out = gated_encode(s, Vec{1.0});  // pre_gate exactly zero
  REQUIRE(out.pre_gate[0] == 0.0);
  REQUIRE(out.gate_mask[0] == 0);
  REQUIRE(out.features[0] == 0.0);
}

TEST_CASE("gate dominance and nonnegativity on random gated models") {
  CounterRng rng(77);
  for (int rep = 0; rep < 30; ++rep) {
    GatedSae s = random_tied_gated(4, 9, rng);
    Vec x(4);
    for (auto& v : x) v = rng.normal();
    auto out = gated_encode(s, x);
    for (std::size_t i = 0; i < s.d_feat; ++i) {
      REQUIRE(out.features[i] >= 0.0);
      if (out.features[i] > 0.0) {
        REQUIRE(out.pre_gate[i] > 0.0);
        REQUIRE(out.mag_acts[i] > 0.0);
      }
    }
  }
}

TEST_CASE("jumprelu_theta arithmetic") {
  auto s = make_gated_1d(1.0, -1.0, 0.0, 0.0);
  REQUIRE(jumprelu_theta(s)[0] == Catch::Approx(1.0));

  s = make_gated_1d(1.0, 0.0, 0.7, 3.0);
  REQUIRE(jumprelu_theta(s)[0] == Catch::Approx(3.0));  // b_gate = 0

  s = make_gated_1d(1.0, 1.0, std::log(2.0), 3.0);
  REQUIRE(jumprelu_theta(s)[0] == Catch::Approx(1.0));  // 3 - 2*1

  s.tying = Tying::Untied;
  s.w_mag_untied = s.w_gate;
  REQUIRE_THROWS_AS(jumprelu_theta(s), std::logic_error);
}

TEST_CASE("jumprelu encode: gap behavior and zero-gap ReLU") {
  JumpReluView v;
  v.w_mag = Mat(1, 1);
  v.w_mag.at(0, 0) = 1.0;
  v.b_mag = {0.0};
  v.theta = {1.0};
  Vec b_dec = {0.0};
  REQUIRE(jumprelu_encode(v, Vec{2.0}, b_dec)[0] == 2.0);
  REQUIRE(jumprelu_encode(v, Vec{0.5}, b_dec)[0] == 0.0);

  v.theta = {0.0};
  REQUIRE(jumprelu_encode(v, Vec{0.5}, b_dec)[0] == 0.5);
  REQUIRE(jumprelu_encode(v, Vec{-0.5}, b_dec)[0] == 0.0);
}

TEST_CASE("tied gated forward equals its jumprelu view exactly") {
  CounterRng rng(2024);
  int positive_features = 0;
  for (int rep = 0; rep < 1000; ++rep) {
    GatedSae s = random_tied_gated(3, 7, rng);
    JumpReluView view = jumprelu_view(s);
    Vec x(3);
    for (auto& v : x) v = rng.normal();
    auto gated = gated_encode(s, x);
    Vec jump = jumprelu_encode(view, x, s.b_dec);
    for (std::size_t i = 0; i < s.d_feat; ++i) {
      REQUIRE(std::abs(gated.features[i] - jump[i]) < 1e-12);
      if (gated.features[i] > 0.0) ++positive_features;
    }
  }
  REQUIRE(positive_features > 1000);  // the comparison is not vacuous
}

TEST_CASE("init_params: unit decoder rows, aligned encoders, shared stream") {
  auto baseline = init_params(SaeKind::Baseline, 6, 12, 99);
  auto gated = init_params(SaeKind::GatedTied, 6, 12, 99);
  const auto& b = std::get<BaselineSae>(baseline);
  const auto& g = std::get<GatedSae>(gated);
  for (std::size_t i = 0; i < 12; ++i) {
    REQUIRE(norm2(b.w_dec.row_span(i)) == Catch::Approx(1.0).margin(1e-9));
    REQUIRE(norm2(g.w_dec.row_span(i)) == Catch::Approx(1.0).margin(1e-9));
  }
  REQUIRE(b.w_dec.data == g.w_dec.data);  // same seed, same decoder
  REQUIRE(b.w_enc.data == b.w_dec.data);
  REQUIRE(g.w_gate.data == g.w_dec.data);
  REQUIRE(materialize_w_mag(g).data == g.w_gate.data);  // r_mag = 0
  for (double v : b.b_enc) REQUIRE(v == 0.0);
  for (double v : g.b_gate) REQUIRE(v == 0.0);
  for (double v : g.r_mag) REQUIRE(v == 0.0);
  for (double v : g.b_mag) REQUIRE(v == 0.0);
}

TEST_CASE("renormalize_decoder: 3-4-5 row, idempotence, zero row error") {
  Mat w(1, 2);
  w.data = {3.0, 4.0};
  renormalize_decoder(w);
  REQUIRE(w.at(0, 0) == Catch::Approx(0.6));
  REQUIRE(w.at(0, 1) == Catch::Approx(0.8));

  Mat before = w;
  renormalize_decoder(w);
  REQUIRE(std::abs(w.at(0, 0) - before.at(0, 0)) <= 1e-15);
  REQUIRE(std::abs(w.at(0, 1) - before.at(0, 1)) <= 1e-15);

  Mat z(2, 2);
  z.data = {1.0, 0.0, 0.0, 0.0};
  try {
    renormalize_decoder(z);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    REQUIRE(std::string(e.what()).find("1") != std::string::npos);
  }
}

TEST_CASE("renormalize preserves row directions") {
  CounterRng rng(4);
  Mat w(5, 3);
  for (auto& v : w.data) v = rng.normal() * 3.0;
  Mat orig = w;
  renormalize_decoder(w);
  for (std::size_t i = 0; i < 5; ++i) {
    const double cos = dot(w.row_span(i), orig.row_span(i)) /
                       (norm2(w.row_span(i)) * norm2(orig.row_span(i)));
    REQUIRE(cos == Catch::Approx(1.0).margin(1e-12));
  }
}

TEST_CASE("checkpoints round-trip bit-exactly for every kind") {
  auto dir = fs::temp_directory_path() / "gdict_sae_tests";
  fs::create_directories(dir);
  CounterRng rng(11);

  for (SaeKind kind : {SaeKind::Baseline, SaeKind::GatedTied, SaeKind::GatedUntied}) {
    SaeModel m = init_params(kind, 5, 9, 1234);
    // Perturb so the file is not all structure.
    std::visit(
        [&](auto& s) {
          for (auto& v : s.w_dec.data) v += 1e-3 * rng.normal();
          for (auto& v : s.b_dec) v = rng.normal();
        },
        m);
    const auto path = (dir / ("ckpt_" + std::to_string(static_cast<int>(kind)) + ".gsae")).string();
    save_checkpoint(path, m);
    SaeModel back = load_checkpoint(path);
    REQUIRE(kind_of(back) == kind);
    if (kind == SaeKind::Baseline) {
      const auto& a = std::get<BaselineSae>(m);
      const auto& b = std::get<BaselineSae>(back);
      REQUIRE(a.w_enc.data == b.w_enc.data);
      REQUIRE(a.b_enc == b.b_enc);
      REQUIRE(a.w_dec.data == b.w_dec.data);
      REQUIRE(a.b_dec == b.b_dec);
    } else {
      const auto& a = std::get<GatedSae>(m);
      const auto& b = std::get<GatedSae>(back);
      REQUIRE(a.w_gate.data == b.w_gate.data);
      REQUIRE(a.b_gate == b.b_gate);
      REQUIRE(a.r_mag == b.r_mag);
      REQUIRE(a.b_mag == b.b_mag);
      REQUIRE(a.w_dec.data == b.w_dec.data);
      REQUIRE(a.b_dec == b.b_dec);
      if (kind == SaeKind::GatedUntied) {
        REQUIRE(a.w_mag_untied->data == b.w_mag_untied->data);
      }
    }
    // Re-saving the loaded model reproduces the file byte for byte.
    const auto path2 = path + ".again";
    save_checkpoint(path2, back);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    REQUIRE(c1 == c2);
  }
}

TEST_CASE("checkpoint loader rejects corrupt headers") {
  auto dir = fs::temp_directory_path() / "gdict_sae_tests";
  fs::create_directories(dir);
  const auto path = (dir / "bad.gsae").string();
  std::ofstream out(path, std::ios::binary);
  out << "XSAE" << std::string(20, '\0');
  out.close();
  REQUIRE_THROWS_AS(load_checkpoint(path), FormatError);
}

TEST_CASE("dimension mismatches are contract violations") {
  auto s = make_baseline_1d(1.0, 0.0, 1.0, 0.0);
  REQUIRE_THROWS_AS(baseline_encode(s, Vec{1.0, 2.0}), std::invalid_argument);
  auto g = make_gated_1d(1.0, 0.0, 0.0, 0.0);
  REQUIRE_THROWS_AS(gated_encode(g, Vec{1.0, 2.0}), std::invalid_argument);
  Mat w(2, 2, 1.0);
  REQUIRE_THROWS_AS(decode(w, Vec{0.0, 0.0}, Vec{1.0}), std::invalid_argument);
}
