// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace disgcmae;
using namespace disgcmae::testing;

namespace {

QueueEntry key(std::vector<double> v, std::uint64_t source, Origin o = Origin::Teacher) {
  return {std::move(v), source, o, ViewKind::Key};
}

Tensor rows_of(const std::vector<std::vector<double>>& rows) {
  Tensor t = Tensor::zeros(rows.size(), rows.empty() ? 0 : rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j) t(i, j) = rows[i][j];
  return t;
}

struct SmallCorpus {
  std::vector<EegGraph> hd;
  std::vector<std::size_t> keep;
};

SmallCorpus small_corpus(std::size_t count, std::uint64_t seed) {
  Rng rng(seed);
  SmallCorpus c;
  for (std::size_t i = 0; i < count; ++i) {
    auto g = random_graph(8, 3, rng, 0.6);
    g.subject_id = "s" + std::to_string(i / 2);
    c.hd.push_back(std::move(g));
  }
  c.keep = {0, 2, 5, 7};
  return c;
}

PretrainConfig small_pretrain() {
  PretrainConfig cfg;
  cfg.batch_size = 4;
  cfg.queue_capacity = 16;
  cfg.epochs = 3;
  cfg.momentum = 0.9;
  return cfg;
}

}  // namespace

TEST(KeyQueue, FifoOrderAndCapacity) {
  KeyQueue q(8);
  for (std::uint64_t s = 0; s < 3; ++s) q.push(key({1.0, 0.0}, s));
  ASSERT_EQ(q.size(), 3u);
  for (std::uint64_t s = 0; s < 3; ++s) EXPECT_EQ(q.entries()[s].source_id, s);
  for (std::uint64_t s = 3; s < 8; ++s) q.push(key({0.0, 1.0}, s));
  ASSERT_EQ(q.size(), 8u);
  q.push(key({1.0, 0.0}, 8));
  q.push(key({1.0, 0.0}, 9));
  ASSERT_EQ(q.size(), 8u);
  for (std::uint64_t i = 0; i < 8; ++i) EXPECT_EQ(q.entries()[i].source_id, i + 2);
}

TEST(KeyQueue, RejectsNonUnitAndMismatchedKeys) {
  KeyQueue q(4);
  EXPECT_THROW(q.push(key({1.0, 1.0}, 0)), ContractViolation);
  q.push(key({0.6, 0.8}, 0));
  EXPECT_THROW(q.push(key({1.0, 0.0, 0.0}, 1)), ContractViolation);
  EXPECT_THROW(KeyQueue(0), ContractViolation);
}

TEST(KeyQueue, SharedPoolServesBothEncoders) {
  KeyQueue q(8);
  q.push(key({1.0, 0.0}, 1, Origin::Teacher));
  q.push(key({0.0, 1.0}, 2, Origin::Student));
  q.push(key({0.6, 0.8}, 3, Origin::Teacher));
  q.push(key({0.8, 0.6}, 1, Origin::Student));
  const Tensor for1 = q.negatives_for(1);
  ASSERT_EQ(for1.rows(), 2u);
  EXPECT_EQ(for1(0, 1), 1.0);
  EXPECT_EQ(for1(1, 0), 0.6);
  EXPECT_EQ(q.negatives_for(2).rows(), 3u);
  EXPECT_EQ(q.negatives_for(99).rows(), 4u);
}

TEST(ReconstructionLoss, WorkedCases) {
  EXPECT_EQ(reconstruction_loss(rows_of({{1.0}}), rows_of({{1.0}}), rows_of({{0.0}})), 2.0);
  Rng rng(1);
  // Small integers keep x x^T exact under any evaluation order.
  Tensor x = Tensor::zeros(5, 3);
  for (double& v : x.values) v = static_cast<double>(rng.below(7)) - 3.0;
  Tensor a = Tensor::zeros(5, 5);
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      for (std::size_t k = 0; k < 3; ++k) a(i, j) += x(i, k) * x(j, k);
  EXPECT_EQ(reconstruction_loss(x, a, x), 0.0);
  EXPECT_THROW(reconstruction_loss(x, a, random_tensor(5, 2, rng)), ContractViolation);
  EXPECT_THROW(reconstruction_loss(x, Tensor::zeros(4, 4), x), ContractViolation);
}

TEST(ReconstructionLoss, TapeFormMatchesValueAndGradient) {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const Tensor x = random_tensor(4, 3, rng), a = random_adjacency(4, rng), xt = random_tensor(4, 3, rng);
    const double v = reconstruction_loss(x, a, xt);
    EXPECT_GT(v, 0.0);
    Tape tape;
    EXPECT_NEAR(ad::reconstruction_loss(tape.constant(xt), x, a).item(), v, 1e-12);
    EXPECT_LE(grad_check({xt}, [&](std::vector<Var>& in) { return ad::reconstruction_loss(in[0], x, a); }), 1e-6);
  }
}

TEST(InfoNce, WorkedCases) {
  const std::vector<double> q{1.0, 0.0};
  EXPECT_NEAR(info_nce(q, rows_of({{1.0, 0.0}}), rows_of({{0.0, 1.0}}), 1.0), -std::log(std::exp(1.0) / (std::exp(1.0) + 1.0)), 1e-15);
  EXPECT_NEAR(info_nce(q, rows_of({{1.0, 0.0}}), rows_of({{0.0, 1.0}}), 1.0), 0.3133, 5e-5);
  EXPECT_NEAR(info_nce(q, rows_of({{1.0, 0.0}}), rows_of({{1.0, 0.0}}), 1.0), std::log(2.0), 1e-15);
  Rng rng(3);
  Tensor neg = Tensor::zeros(7, 2);
  for (std::size_t r = 0; r < 7; ++r) {
    const auto u = random_unit(2, rng);
    neg(r, 0) = u[0];
    neg(r, 1) = u[1];
  }
  EXPECT_NEAR(info_nce(random_unit(2, rng), rows_of({random_unit(2, rng)}), neg, 1e6), std::log(8.0), 1e-5);
  EXPECT_THROW(info_nce(q, rows_of({{1.0, 0.0}}), Tensor::zeros(0, 0), 1.0), ContractViolation);
  EXPECT_THROW(info_nce(q, rows_of({{1.0, 0.0}}), rows_of({{0.0, 1.0}}), 0.0), ContractViolation);
}

TEST(InfoNce, MatchesDirectSummationOracle) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const std::size_t c = 2 + rng.below(6), queue = 1 + rng.below(64), npos = 1 + rng.below(4);
    const double tau = 0.05 + rng.uniform();
    KeyQueue kq(64);
    for (std::size_t r = 0; r < queue; ++r) kq.push(key(random_unit(c, rng), 1 + rng.below(5)));
    const auto q = random_unit(c, rng);
    Tensor pos = Tensor::zeros(npos, c);
    for (std::size_t p = 0; p < npos; ++p) {
      const auto u = random_unit(c, rng);
      std::copy(u.begin(), u.end(), pos.values.begin() + static_cast<long>(p * c));
    }
    const std::uint64_t own = rng.below(6);
    const Tensor neg = kq.negatives_for(own);
    if (neg.size() == 0) {
      EXPECT_THROW(info_nce(q, pos, kq, own, tau), ContractViolation);
      continue;
    }
    const double v = info_nce(q, pos, kq, own, tau);
    ASSERT_NEAR(v, info_nce_oracle(q, pos, neg, tau), 1e-10) << "seed " << seed;
    EXPECT_GE(v, 0.0);
    Tape tape;
    EXPECT_NEAR(ad::info_nce(tape.constant(Tensor::row(q)), pos, neg, tau).item(), v, 1e-10);
  }
}

TEST(InfoNce, DecreasesAsPositiveSimilarityGrows) {
  Rng rng(4);
  Tensor neg = Tensor::zeros(10, 3);
  for (std::size_t r = 0; r < 10; ++r) {
    const auto u = random_unit(3, rng);
    std::copy(u.begin(), u.end(), neg.values.begin() + static_cast<long>(r * 3));
  }
  const std::vector<double> q{1.0, 0.0, 0.0};
  double prev = INFINITY;
  for (double angle = 3.0; angle >= 0.0; angle -= 0.25) {
    const double v = info_nce(q, rows_of({{std::cos(angle), std::sin(angle), 0.0}}), neg, 0.2);
    EXPECT_LT(v, prev);
    prev = v;
  }
}

TEST(InfoNce, TapeGradientMatchesFiniteDifferences) {
  Rng rng(5);
  for (int t = 0; t < 20; ++t) {
    const Tensor pos = rows_of({random_unit(4, rng), random_unit(4, rng)});
    const Tensor neg = rows_of({random_unit(4, rng), random_unit(4, rng), random_unit(4, rng)});
    const Tensor q = Tensor::row(random_unit(4, rng));
    EXPECT_LE(grad_check({q}, [&](std::vector<Var>& in) { return ad::info_nce(in[0], pos, neg, 0.3); }), 1e-6);
  }
}

TEST(PretrainConfig, ValidatesRanges) {
  PretrainConfig c;
  EXPECT_NO_THROW(c.validate());
  c.queue_capacity = c.batch_size - 1;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = {};
  c.temperature = 0;
  EXPECT_THROW(c.validate(), ContractViolation);
  c = {};
  c.node_drop = 1.0;
  EXPECT_THROW(c.validate(), ContractViolation);
}

class PretrainGradient : public ::testing::TestWithParam<std::pair<EncoderFamily, EncoderFamily>> {};

TEST_P(PretrainGradient, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 0; seed < 5; ++seed)
    EXPECT_LE(pretrain_grad_error(GetParam().first, GetParam().second, seed), 1e-4) << "seed " << seed;
}

INSTANTIATE_TEST_SUITE_P(Pairs, PretrainGradient,
                         ::testing::Values(std::pair{EncoderFamily::DGCNN, EncoderFamily::DGCNN},
                                           std::pair{EncoderFamily::GFormer, EncoderFamily::GFormer},
                                           std::pair{EncoderFamily::GFormer, EncoderFamily::DGCNN}),
                         [](const auto& info) { return to_string(info.param.first) + "_" + to_string(info.param.second); });

TEST(PretrainStep, DecompositionKeysAndMomentum) {
  const auto corpus = small_corpus(8, 6);
  auto cfg = small_pretrain();
  PretrainState st = init_pretrain(small_encoder(EncoderFamily::DGCNN), small_encoder(EncoderFamily::DGCNN), cfg, 9);
  std::vector<EegGraph> ld;
  for (const auto& g : corpus.hd) ld.push_back(reduce_density(g, corpus.keep).first);
  for (std::uint64_t step = 0; step < 8; ++step) {
    std::vector<PairedSample> batch;
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t k = (4 * step + i) % 8;
      batch.push_back({&corpus.hd[k], &ld[k], k});
    }
    const ParamSet key_before = st.teacher_key;
    const auto rep = pretrain_step(st, batch, cfg, Rng(step));
    const auto& l = rep.loss;
    for (double v : {l.l_cl_t, l.l_cl_s, l.l_rec_t, l.l_rec_s, l.total}) EXPECT_TRUE(std::isfinite(v));
    EXPECT_NEAR(l.total, l.l_cl_t + l.l_cl_s + l.l_rec_t + l.l_rec_s, 1e-9);
    EXPECT_EQ(rep.contrastive_active, step >= 1);
    if (!rep.contrastive_active) EXPECT_EQ(l.l_cl_t + l.l_cl_s, 0.0);
    EXPECT_EQ(st.queue.size(), std::min<std::size_t>(16, 16 * (step + 1)));
    // Key encoders move only by the momentum rule toward the updated query weights.
    for (std::size_t e = 0; e < st.teacher_key.size(); ++e) {
      const auto& kv = st.teacher_key.entries()[e].tensor.values;
      const auto& qv = st.teacher.entries()[e].tensor.values;
      const auto& bv = key_before.entries()[e].tensor.values;
      for (std::size_t i = 0; i < kv.size(); ++i) ASSERT_EQ(kv[i], 0.9 * bv[i] + (1.0 - 0.9) * qv[i]);
    }
  }
  EXPECT_EQ(st.step, 8u);
}

TEST(PretrainStep, SampleGradientsTouchOnlyQuerySide) {
  const auto corpus = small_corpus(2, 7);
  auto cfg = small_pretrain();
  PretrainState st = init_pretrain(small_encoder(EncoderFamily::GFormer), small_encoder(EncoderFamily::DGCNN), cfg, 3);
  Rng rng(8);
  for (std::uint64_t k = 0; k < 8; ++k) st.queue.push(key(random_unit(3, rng), 50 + k));
  const auto ld = reduce_density(corpus.hd[0], corpus.keep).first;
  const auto res = detail::pretrain_sample(st, {&corpus.hd[0], &ld, 0}, cfg, true, 1.0, Rng(1));
  EXPECT_GT(res.loss.l_cl_t, 0.0);
  ASSERT_EQ(res.keys.size(), 4u);
  for (const auto& k : res.keys) EXPECT_EQ(k.source_id, 0u);
  for (const auto& [name, g] : res.teacher_grads) {
    EXPECT_TRUE(st.teacher.contains(name));
    EXPECT_FALSE(name.starts_with("cls.")) << name;
  }
  EXPECT_TRUE(res.teacher_grads.contains("mask"));
  EXPECT_TRUE(res.student_grads.contains("proj.w2"));
  EXPECT_TRUE(res.student_grads.contains("dec.w2"));
}

TEST(PretrainStep, ReconstructionTermsVanishOnExactReconstruction) {
  // Zero features and adjacency with zero biases reconstruct exactly, so the
  // gradient is the contrastive gradient alone.
  EegGraph g;
  g.x = Tensor::zeros(4, 3);
  g.a = Tensor::zeros(4, 4);
  g.node_ids = {0, 1, 2, 3};
  g.subject_id = "z";
  const auto ld = reduce_density(g, {0, 1, 3}).first;
  PretrainConfig cfg = small_pretrain();
  cfg.node_drop = cfg.edge_drop = 0.0;
  PretrainState st = init_pretrain(small_encoder(EncoderFamily::DGCNN), small_encoder(EncoderFamily::DGCNN), cfg, 5);
  Rng rng(6);
  for (ParamSet* p : {&st.teacher, &st.student, &st.teacher_key, &st.student_key})
    for (double& v : p->at("proj.b2").values) v = rng.normal();
  for (std::uint64_t k = 0; k < 8; ++k) st.queue.push(key(random_unit(3, rng), 50 + k));
  const PairedSample s{&g, &ld, 0};
  const auto both = detail::pretrain_sample(st, s, cfg, true, 1.0, Rng(1));
  EXPECT_EQ(both.loss.l_rec_t, 0.0);
  EXPECT_EQ(both.loss.l_rec_s, 0.0);
  EXPECT_GT(both.loss.l_cl_t, 0.0);
  cfg.w_rec_t = cfg.w_rec_s = 0.0;
  const auto cl_only = detail::pretrain_sample(st, s, cfg, true, 1.0, Rng(1));
  EXPECT_EQ(both.teacher_grads, cl_only.teacher_grads);
  EXPECT_EQ(both.student_grads, cl_only.student_grads);
}

TEST(PretrainStep, RejectsUnpairedBatches) {
  const auto corpus = small_corpus(4, 10);
  auto cfg = small_pretrain();
  PretrainState st = init_pretrain(small_encoder(EncoderFamily::DGCNN), small_encoder(EncoderFamily::DGCNN), cfg, 1);
  auto ld = reduce_density(corpus.hd[0], corpus.keep).first;
  EXPECT_THROW(pretrain_step(st, {{&corpus.hd[2], &ld, 0}}, cfg, Rng(1)), ContractViolation);
  ld.node_ids[0] = 99;
  EXPECT_THROW(pretrain_step(st, {{&corpus.hd[0], &ld, 0}}, cfg, Rng(1)), ContractViolation);
  EXPECT_THROW(pretrain_step(st, {}, cfg, Rng(1)), ContractViolation);
}

TEST(RunPretraining, DeterministicAndThreadIndependent) {
  const auto corpus = small_corpus(12, 11);
  auto cfg = small_pretrain();
  const auto t = small_encoder(EncoderFamily::GFormer), s = small_encoder(EncoderFamily::DGCNN);
  const auto a = run_pretraining(corpus.hd, corpus.keep, t, s, cfg, 4);
  const auto b = run_pretraining(corpus.hd, corpus.keep, t, s, cfg, 4);
  cfg.threads = 3;
  const auto c = run_pretraining(corpus.hd, corpus.keep, t, s, cfg, 4);
  ASSERT_EQ(a.report.size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(a.report[e].loss.total, b.report[e].loss.total);
    EXPECT_EQ(a.report[e].loss.total, c.report[e].loss.total);
    EXPECT_NEAR(a.report[e].loss.total,
                a.report[e].loss.l_cl_t + a.report[e].loss.l_cl_s + a.report[e].loss.l_rec_t + a.report[e].loss.l_rec_s,
                1e-9);
  }
  EXPECT_EQ(a.state.student.at("enc.gcn0.w").values, c.state.student.at("enc.gcn0.w").values);
  const auto d = run_pretraining(corpus.hd, corpus.keep, t, s, cfg, 5);
  EXPECT_NE(a.report[0].loss.total, d.report[0].loss.total);
}

TEST(RunPretraining, LossCsvHasSpecifiedColumns) {
  const auto corpus = small_corpus(8, 12);
  auto cfg = small_pretrain();
  cfg.epochs = 2;
  const auto r = run_pretraining(corpus.hd, corpus.keep, small_encoder(EncoderFamily::DGCNN),
                                 small_encoder(EncoderFamily::DGCNN), cfg, 1);
  const auto path = (std::filesystem::temp_directory_path() / "disgcmae_loss_test.csv").string();
  write_loss_csv(path, r.report);
  std::ifstream in(path);
  std::string header, row;
  std::getline(in, header);
  EXPECT_EQ(header, "epoch,l_cl_t,l_cl_s,l_rec_t,l_rec_s,l_pretrain");
  std::size_t rows = 0;
  while (std::getline(in, row)) ++rows;
  EXPECT_EQ(rows, 2u);
  std::filesystem::remove(path);
  EXPECT_THROW(write_loss_csv("/nonexistent_dir/x.csv", r.report), IoError);
}
