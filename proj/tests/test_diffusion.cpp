// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "support.hpp"

using namespace texforce;

namespace {

const auto kNone = static_cast<const AdapterSet<double>*>(nullptr);

struct Moments {
  double mean = 0, var = 0;
};

Moments moments(const std::vector<double>& v) {
  Moments m;
  for (double x : v) m.mean += x;
  m.mean /= static_cast<double>(v.size());
  for (double x : v) m.var += (x - m.mean) * (x - m.mean);
  m.var /= static_cast<double>(v.size() - 1);
  return m;
}

void zero_output(DiffusionModel<double>& m) {
  m.denoiser.params.at("denoiser.out.conv.weight").setZero();
  m.denoiser.params.at("denoiser.out.conv.bias").setZero();
}

}  // namespace

TEST_CASE("schedule examples") {
  const auto two = build_schedule(2, 0.1, 0.1);
  CHECK(two.alpha_bar(1) == doctest::Approx(0.9).epsilon(1e-15));
  CHECK(two.alpha_bar(2) == doctest::Approx(0.81).epsilon(1e-15));
  CHECK(two.alpha_bar(0) == 1.0);

  const auto flat = build_schedule(7, 0.03, 0.03);
  for (int t = 1; t <= 7; ++t) CHECK(flat.beta(t) == 0.03);

  const auto s = build_schedule(50, 1e-4, 0.02);
  double log_bar = 0;
  for (int i = 0; i < 50; ++i) log_bar += std::log1p(-(1e-4 + (0.02 - 1e-4) * i / 49.0));
  CHECK(std::abs(s.alpha_bar(50) - std::exp(log_bar)) <= 1e-10);
  CHECK(s.beta(1) == 1e-4);
  CHECK(s.beta(50) == doctest::Approx(0.02).epsilon(1e-14));

  for (const auto& sched : {s, build_schedule(50, 0.002, 0.4), two}) {
    for (int t = 1; t <= sched.steps; ++t) {
      CHECK(sched.sigma(t) > 0.0);
      CHECK(sched.sigma(1) <= sched.sigma(t));
      CHECK(sched.alpha_bar(t) > 0.0);
      CHECK(sched.alpha_bar(t) < sched.alpha_bar(t - 1));
    }
  }
  CHECK_THROWS_AS(build_schedule(1, 0.1, 0.2), Error);
  CHECK_THROWS_AS(build_schedule(10, 0.0, 0.2), Error);
  CHECK_THROWS_AS(build_schedule(10, 0.3, 0.2), Error);
  CHECK_THROWS_AS(build_schedule(10, 0.1, 1.0), Error);
}

TEST_CASE("forward_diffuse examples") {
  const auto s = build_schedule(10, 0.01, 0.2);
  Rng rng(1);
  const Matrix<double> x0 = gaussian_matrix<double>(3, 16, 1.0, rng);
  const Matrix<double> zero = Matrix<double>::Zero(3, 16);
  CHECK((forward_diffuse(x0, 4, zero, s) - std::sqrt(s.alpha_bar(4)) * x0).cwiseAbs().maxCoeff() < 1e-15);

  NoiseSchedule identity = s;
  identity.alpha_bars[0] = 1.0;
  const Matrix<double> eps = gaussian_matrix<double>(3, 16, 1.0, rng);
  CHECK(forward_diffuse(x0, 1, eps, identity) == x0);

  CHECK_THROWS_AS(forward_diffuse(x0, 1, Matrix<double>(Matrix<double>::Zero(3, 15)), s), Error);
  CHECK_THROWS_AS(forward_diffuse(x0, 0, eps, s), Error);
  CHECK_THROWS_AS(forward_diffuse(x0, 11, eps, s), Error);
}

TEST_CASE("Markov noising composed T times matches the closed-form marginal") {
  const auto s = build_schedule(20, 0.01, 0.2);
  const double x0 = 0.7;
  const int n = 10000;
  Rng rng(2);
  std::normal_distribution<double> normal;
  std::vector<double> finals;
  for (int i = 0; i < n; ++i) {
    double x = x0;
    for (int t = 1; t <= s.steps; ++t) x = std::sqrt(1 - s.beta(t)) * x + std::sqrt(s.beta(t)) * normal(rng);
    finals.push_back(x);
  }
  const auto m = moments(finals);
  const double mean = std::sqrt(s.alpha_bar(20)) * x0, var = 1 - s.alpha_bar(20);
  CHECK(std::abs(m.mean - mean) < 3 * std::sqrt(var / n));
  CHECK(std::abs(m.var - var) < 3 * var * std::sqrt(2.0 / (n - 1)));
}

TEST_CASE("posterior mean of a one-pixel image by hand") {
  const auto s = build_schedule(2, 0.1, 0.3);
  Matrix<double> x(1, 1), e(1, 1);
  x(0, 0) = 0.5;
  e(0, 0) = 0.3;
  // t = 2: alpha = 0.7, abar = 0.9 * 0.7 = 0.63.
  const double hand2 = (0.5 - 0.3 / std::sqrt(1 - 0.63) * 0.3) / std::sqrt(0.7);
  CHECK(std::abs(posterior_mean(x, e, 2, s)(0, 0) - hand2) < 1e-10);
  // t = 1: alpha = abar = 0.9.
  const double hand1 = (0.5 - 0.1 / std::sqrt(0.1) * 0.3) / std::sqrt(0.9);
  CHECK(std::abs(posterior_mean(x, e, 1, s)(0, 0) - hand1) < 1e-10);
  CHECK(mean_noise_coefficient(2, s) == doctest::Approx(-0.3 / std::sqrt(1 - 0.63) / std::sqrt(0.7)));
  // Posterior variance for t = 2; t = 1 takes half of the smallest.
  const double var2 = 0.3 * (1 - 0.9) / (1 - 0.63);
  CHECK(std::abs(s.sigma(2) * s.sigma(2) - var2) < 1e-12);
  CHECK(std::abs(s.sigma(1) * s.sigma(1) - 0.5 * var2) < 1e-12);
  CHECK_THROWS_AS(posterior_mean(x, e, 3, s), Error);
}

TEST_CASE("guidance scale 1 and 0 collapse to a single branch") {
  Rng rng(3);
  const auto m = testing::tiny_model<double>(rng, 3, 4);
  const Matrix<double> x = gaussian_matrix<double>(3, m.pixels(), 1.0, rng);
  const auto z = encode_prompt(m, kNone, "a red circle");
  const auto empty = encode_prompt(m, kNone, "");
  const Matrix<double> cond = z.pooled(), uncond = empty.pooled();
  const auto eps_c = predict_noise(m.denoiser, kNone, x, {2}, cond);
  const auto eps_u = predict_noise(m.denoiser, kNone, x, {2}, uncond);

  Policy<double> one{m, nullptr, 1.0};
  const auto r1 = reverse_step(one, x, 2, z);
  CHECK((r1.mean - posterior_mean(x, eps_c, 2, m.schedule)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(r1.std == m.schedule.sigma(2));

  Policy<double> zero{m, nullptr, 0.0};
  CHECK((reverse_step(zero, x, 2, z).mean - posterior_mean(x, eps_u, 2, m.schedule)).cwiseAbs().maxCoeff() < 1e-12);

  Policy<double> three{m, nullptr, 3.0};
  const Matrix<double> guided = eps_u + 3.0 * (eps_c - eps_u);
  CHECK((reverse_step(three, x, 2, z).mean - posterior_mean(x, guided, 2, m.schedule)).cwiseAbs().maxCoeff() <
        1e-12);
  CHECK_THROWS_AS(reverse_step(three, x, 4, z), Error);
  CHECK_THROWS_AS(reverse_step(three, x, 0, z), Error);
}

TEST_CASE("gaussian_log_prob examples") {
  const Matrix<double> four = Matrix<double>::Constant(2, 2, 0.3);
  CHECK(gaussian_log_prob(four, four, 1.0) == doctest::Approx(-2.0 * std::log(2 * std::numbers::pi)));
  Matrix<double> one(1, 1), zero(1, 1);
  one(0, 0) = 1.0;
  zero(0, 0) = 0.0;
  CHECK(gaussian_log_prob(one, zero, 1.0) == doctest::Approx(-1.41894).epsilon(1e-5));
  CHECK_THROWS_AS(gaussian_log_prob(one, zero, 0.0), Error);
  CHECK_THROWS_AS(gaussian_log_prob(one, zero, -1.0), Error);
  CHECK_THROWS_AS(gaussian_log_prob(four, one, 1.0), Error);

  Rng rng(4);
  std::uniform_real_distribution<double> u(0.05, 2.0);
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix<double> x = gaussian_matrix<double>(8, 1, 1.0, rng);
    const Matrix<double> mu = gaussian_matrix<double>(8, 1, 1.0, rng);
    const double sd = u(rng);
    double oracle = 0;
    for (int i = 0; i < 8; ++i) {
      const double z = (x(i) - mu(i)) / sd;
      oracle += std::log(std::exp(-0.5 * z * z) / (sd * std::sqrt(2 * std::numbers::pi)));
    }
    CHECK(std::abs(gaussian_log_prob(x, mu, sd) - oracle) <= 1e-9);
  }
}

TEST_CASE("trajectories are deterministic and store consistent log-probs") {
  Rng rng(5);
  const auto m = testing::tiny_model<float>(rng, 4, 8);
  const Policy<float> policy{m, nullptr, 3.0};
  const auto a = sample_trajectory(policy, "a blue square", 99);
  const auto b = sample_trajectory(policy, "a blue square", 99);
  REQUIRE(a.steps.size() == 4);
  CHECK(a.x0 == b.x0);
  for (std::size_t i = 0; i < a.steps.size(); ++i) {
    CHECK(a.steps[i].t == 4 - static_cast<int>(i));
    CHECK(a.steps[i].x_prev == b.steps[i].x_prev);
    CHECK(a.steps[i].log_prob_old == b.steps[i].log_prob_old);
    const auto& st = a.steps[i];
    CHECK(std::abs(gaussian_log_prob(st.x_prev, st.mean, st.std) - st.log_prob_old) <= 1e-5);
    if (i + 1 < a.steps.size()) CHECK(a.steps[i + 1].x_t == st.x_prev);
    // The stored mean is the reverse-step mean for the stored state.
    const auto r = reverse_step(policy, st.x_t, st.t, a.z);
    CHECK((r.mean - st.mean).cwiseAbs().maxCoeff() < 1e-5f);
  }
  CHECK(a.steps.back().x_prev == a.x0);
  CHECK(sample_trajectory(policy, "a blue square", 100).x0 != a.x0);

  // Batched sampling reproduces single samples up to matrix-product blocking.
  const auto batch = sample_trajectories(policy, {"a red circle", "a blue square", "two green squares"}, {7, 99, 3});
  const auto single = sample_trajectory(policy, "a red circle", 7);
  CHECK((batch[1].x0 - a.x0).cwiseAbs().maxCoeff() <= 1e-4f * a.x0.cwiseAbs().maxCoeff());
  CHECK((batch[0].x0 - single.x0).cwiseAbs().maxCoeff() <= 1e-4f * single.x0.cwiseAbs().maxCoeff());
}

TEST_CASE("zero predictor with tiny sigma follows the closed-form mean recursion") {
  Rng rng(6);
  auto m = testing::tiny_model<double>(rng, 3, 4);
  zero_output(m);
  for (auto& s : m.schedule.sigmas) s = 1e-12;
  const Policy<double> policy{m, nullptr, 3.0};
  const auto tr = sample_trajectory(policy, "a red circle", 5);
  const Matrix<double>& xT = tr.steps.front().x_t;
  const double scale = 1.0 / std::sqrt(m.schedule.alpha(3) * m.schedule.alpha(2) * m.schedule.alpha(1));
  CHECK((tr.x0 - scale * xT).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("denoising loss cases") {
  Rng rng(7);
  const Matrix<double> eps = gaussian_matrix<double>(3, 32, 1.0, rng);
  Matrix<double> grad;
  CHECK(denoising_loss(eps, eps, 2, &grad) == 0.0);
  CHECK(grad.isZero(0));
  CHECK_THROWS_AS(denoising_loss(eps, eps, 0), Error);
  for (int i = 0; i < 20; ++i) {
    const Matrix<double> other = gaussian_matrix<double>(3, 32, 1.0, rng);
    CHECK(denoising_loss(eps, other, 2) >= 0.0);
  }

  auto m = testing::tiny_model<double>(rng, 3, 16);
  zero_output(m);
  const Image image(16, 16, kBackground);
  const std::vector<TrainingExample> batch(8, TrainingExample{&image, "a red circle"});
  double total = 0;
  const int rounds = 1250;  // 10^4 samples of d = 768
  for (int r = 0; r < rounds; ++r) total += pretrain_step(m, batch, rng, static_cast<Gradients<double>*>(nullptr));
  const double d = 3.0 * 256.0;
  CHECK(std::abs(total / rounds - d) / d < 0.05);
  CHECK_THROWS_AS(pretrain_step(m, std::vector<TrainingExample>{}, rng, static_cast<Gradients<double>*>(nullptr)),
                  Error);
}

TEST_CASE("true-noise reverse step reconstructs x0 in expectation") {
  const auto s = build_schedule(10, 0.01, 0.2);
  Rng rng(8);
  std::normal_distribution<double> normal;
  const double x0 = -0.4;
  for (int t : {1, 4, 10}) {
    std::vector<double> estimates;
    for (int i = 0; i < 10000; ++i) {
      Matrix<double> e(1, 1), x0m(1, 1);
      e(0, 0) = normal(rng);
      x0m(0, 0) = x0;
      const Matrix<double> xt = forward_diffuse(x0m, t, e, s);
      const double mean = posterior_mean(xt, e, t, s)(0, 0);
      const double prev = mean + s.sigma(t) * normal(rng);
      estimates.push_back(prev / std::sqrt(s.alpha_bar(t - 1)));
    }
    const auto m = moments(estimates);
    INFO("t " << t);
    CHECK(std::abs(m.mean - x0) < 3 * std::sqrt(m.var / 10000.0));
  }
}

TEST_CASE("checkpoint round trip and corruption") {
  Rng rng(9);
  DiffusionModel<float> m = testing::tiny_model<float>(rng, 3, 8);
  const auto dir = std::filesystem::temp_directory_path() / "texforce_test_ckpt";
  std::filesystem::create_directories(dir);
  const auto path = dir / "model.ckpt";
  save_checkpoint(model_tensors(m), path);
  const auto loaded = load_checkpoint(path);
  CHECK(loaded == model_tensors(m));

  DiffusionModel<float> other;
  other.schedule = m.schedule;
  restore_model(other, loaded);
  CHECK(other.encoder.params == m.encoder.params);
  CHECK(other.denoiser.params == m.denoiser.params);
  CHECK(other.encoder.config.embed_dim == m.encoder.config.embed_dim);
  CHECK(other.denoiser.config.image_size == 8);
  const Policy<float> p1{m, nullptr, 3.0}, p2{other, nullptr, 3.0};
  CHECK(sample_trajectory(p1, "a red circle", 1).x0 == sample_trajectory(p2, "a red circle", 1).x0);

  std::string bytes;
  {
    std::ifstream in(path, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  }
  CHECK(bytes.substr(0, 8) == "TFCKPT01");
  auto write = [&](const std::string& b) {
    std::ofstream out(dir / "bad.ckpt", std::ios::binary);
    out << b;
  };
  write("TFCKPT02" + bytes.substr(8));
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), Error);
  write(bytes.substr(0, bytes.size() - 7));
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), Error);
  write(bytes + "x");
  CHECK_THROWS_AS(load_checkpoint(dir / "bad.ckpt"), Error);
  std::filesystem::remove_all(dir);
}
