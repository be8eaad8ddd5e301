// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "disgcmae/config.hpp"

namespace disgcmae {

enum ExitCode : int { kExitOk = 0, kExitVerify = 1, kExitIo = 2, kExitData = 3, kExitConfig = 4 };

/// Worker count: hardware threads, capped by DISGCMAE_THREADS when set.
inline std::size_t worker_threads() {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("DISGCMAE_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError(std::string("DISGCMAE_THREADS must be a positive integer, got '") + env + "'");
    n = std::min(n, static_cast<std::size_t>(v));
  }
  return n;
}

/// Runs a command body and maps exceptions onto exit codes.
inline int run_command(const std::function<int()>& body, std::ostream& err) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const ContractViolation& e) {
    err << "invalid input: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitVerify;
  }
}

namespace detail {

inline void ensure_dir(const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " + ec.message());
}

inline std::string join(const std::string& dir, const std::string& file) {
  return (std::filesystem::path(dir) / file).string();
}

inline Dataset load_checked_dataset(const ExperimentConfig& cfg, const std::string& dir) {
  Dataset d = load_dataset(dir);
  for (std::size_t i = 0; i < d.graphs.size(); ++i) {
    const auto& g = d.graphs[i];
    if (g.n() != cfg.hd_channels)
      throw ConfigError("dataset sample " + std::to_string(i) + " has " + std::to_string(g.n()) +
                        " channels, config expects hd_channels = " + std::to_string(cfg.hd_channels));
    if (g.d() != cfg.corpus.n_bins)
      throw ConfigError("dataset feature width " + std::to_string(g.d()) + " differs from n_bins " +
                        std::to_string(cfg.corpus.n_bins));
  }
  return d;
}

/// Encoder shape fields that must agree between a checkpoint and the config.
inline void require_compatible(const EncoderConfig& ck, const EncoderConfig& want, const std::string& role) {
  auto mismatch = [&](const std::string& field, const std::string& a, const std::string& b) {
    throw ConfigError(role + " checkpoint " + field + " is " + a + ", config expects " + b);
  };
  if (ck.family != want.family) mismatch("family", to_string(ck.family), to_string(want.family));
  if (ck.tier != want.tier) mismatch("tier", ck.tier, want.tier);
  if (ck.layers != want.layers) mismatch("layers", std::to_string(ck.layers), std::to_string(want.layers));
  if (ck.hidden != want.hidden) mismatch("hidden", std::to_string(ck.hidden), std::to_string(want.hidden));
  if (ck.in_dim != want.in_dim) mismatch("in_dim", std::to_string(ck.in_dim), std::to_string(want.in_dim));
}

inline Checkpoint load_checkpoint_or_data_error(const std::string& path) {
  if (!std::filesystem::exists(path)) throw IoError("checkpoint " + path + " does not exist");
  return load_checkpoint(path);
}

}  // namespace detail

// ---------------------------------------------------------------- synth

inline int cmd_synth(const ExperimentConfig& cfg, std::ostream& out, std::ostream& err) {
  return run_command(
      [&] {
        cfg.validate();
        if (cfg.corpus.synth.n_subjects == 0) err << "warning: n_subjects = 0, writing an empty dataset\n";
        const auto graphs = generate_corpus(cfg.corpus, cfg.seed);
        save_dataset(cfg.dataset, graphs, cfg.corpus, cfg.seed);
        out << "wrote " << graphs.size() << " samples (" << 2 * cfg.corpus.synth.n_subjects << " subjects, "
            << cfg.corpus.samples_per_subject() << " per subject) to " << cfg.dataset << "\n";
        return kExitOk;
      },
      err);
}

// ---------------------------------------------------------------- pretrain

struct PretrainOptions {
  std::optional<std::size_t> epochs;
  bool gcl_only = false;
  bool gmae_only = false;
};

/// Applies command-line overrides; both ablation flags at once is a config error.
inline PretrainConfig effective_pretrain(const ExperimentConfig& cfg, const PretrainOptions& opt) {
  PretrainConfig p = cfg.pretrain;
  if (opt.gcl_only && opt.gmae_only) throw ConfigError("--gcl-only and --gmae-only are mutually exclusive");
  if (opt.epochs) p.epochs = *opt.epochs;
  if (opt.gcl_only) p.w_rec_t = p.w_rec_s = 0.0;
  if (opt.gmae_only) p.w_cl_t = p.w_cl_s = 0.0;
  return p;
}

inline int cmd_pretrain(const ExperimentConfig& cfg, const PretrainOptions& opt, std::ostream& out,
                        std::ostream& err) {
  return run_command(
      [&] {
        cfg.validate();
        PretrainConfig pc = effective_pretrain(cfg, opt);
        pc.threads = worker_threads();
        const auto data = detail::load_checked_dataset(cfg, cfg.dataset);
        if (data.graphs.empty()) throw DataError("dataset " + cfg.dataset + " has no samples");
        detail::ensure_dir(cfg.output_dir);
        std::ofstream log(detail::join(cfg.output_dir, "pretrain.log"), std::ios::trunc);
        const auto t0 = std::chrono::steady_clock::now();
        auto res = run_pretraining(data.graphs, cfg.keep(), cfg.teacher, cfg.student, pc, cfg.seed,
                                   [&](const EpochLoss& e) {
                                     const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
                                     out << "epoch " << e.epoch << " loss " << e.loss.total << "\n";
                                     log << "epoch " << e.epoch << " loss " << format_number(e.loss.total)
                                         << " elapsed_s " << s << std::endl;
                                   });
        save_checkpoint(detail::join(cfg.output_dir, "teacher.ckpt"),
                        {cfg.teacher, res.state.teacher, res.state.step, cfg.seed});
        save_checkpoint(detail::join(cfg.output_dir, "student.ckpt"),
                        {cfg.student, res.state.student, res.state.step, cfg.seed});
        write_loss_csv(detail::join(cfg.output_dir, "pretrain_loss.csv"), res.report);
        out << "wrote teacher.ckpt, student.ckpt, pretrain_loss.csv to " << cfg.output_dir << "\n";
        return kExitOk;
      },
      err);
}

// ---------------------------------------------------------------- finetune

struct FinetuneOptions {
  std::string teacher;  // required when distilling
  std::string student;  // empty: randomly initialised student
  std::optional<std::string> mode;
  std::optional<std::string> loss;
  std::optional<std::size_t> seeds;
};

inline int cmd_finetune(const ExperimentConfig& cfg, const FinetuneOptions& opt, std::ostream& out,
                        std::ostream& err) {
  return run_command(
      [&] {
        cfg.validate();
        DistillConfig dc = cfg.distill;
        const std::string loss = opt.loss.value_or(cfg.loss);
        try {
          dc.set_loss(loss);
        } catch (const ContractViolation& e) {
          throw ConfigError(e.what());
        }
        if (opt.mode) {
          if (*opt.mode != "tuned" && *opt.mode != "frozen")
            throw ConfigError("--mode must be tuned or frozen, got '" + *opt.mode + "'");
          dc.frozen = *opt.mode == "frozen";
        }
        dc.threads = worker_threads();
        const std::size_t k = opt.seeds.value_or(cfg.finetune_seeds);
        if (k == 0) throw ConfigError("--seeds must be at least 1");
        const bool distill = dc.w_kd != 0.0 || dc.w_gtd != 0.0;
        if (distill && opt.teacher.empty()) throw ConfigError("loss '" + loss + "' needs --teacher");

        std::optional<Checkpoint> teacher, student;
        if (!opt.teacher.empty()) {
          teacher = detail::load_checkpoint_or_data_error(opt.teacher);
          detail::require_compatible(teacher->config, cfg.teacher, "teacher");
        }
        if (!opt.student.empty()) {
          student = detail::load_checkpoint_or_data_error(opt.student);
          detail::require_compatible(student->config, cfg.student, "student");
        }
        const auto data = detail::load_checked_dataset(cfg, cfg.dataset);
        if (data.graphs.empty()) throw DataError("dataset " + cfg.dataset + " has no samples");
        const auto ft = make_finetune_data(data.graphs, cfg.keep());
        detail::ensure_dir(cfg.output_dir);

        std::vector<double> s_acc, s_auc, t_acc, t_auc;
        std::size_t trainable = 0;
        for (std::size_t i = 0; i < k; ++i) {
          const std::uint64_t seed = cfg.seed + i;
          Checkpoint s_ck;
          if (student) {
            s_ck = *student;
          } else {
            Rng r = Rng(seed).derive(103);
            s_ck = {cfg.student, init_model(cfg.student, r), 0, seed};
          }
          Checkpoint t_ck = teacher ? *teacher : Checkpoint{cfg.teacher, {}, 0, seed};
          const auto res = run_finetune(t_ck, s_ck, ft, dc, seed);
          const std::string tag = "seed" + std::to_string(i);
          write_metrics_csv(detail::join(cfg.output_dir, "metrics_" + tag + ".csv"), res.student_run.rows);
          if (distill)
            write_metrics_csv(detail::join(cfg.output_dir, "teacher_metrics_" + tag + ".csv"), res.teacher_run.rows);
          save_checkpoint(detail::join(cfg.output_dir, "student_" + tag + ".ckpt"),
                          {cfg.student, res.student, res.student_run.step_losses.size(), seed});
          s_acc.push_back(res.student_run.test.acc);
          s_auc.push_back(res.student_run.test.auroc);
          if (distill) {
            t_acc.push_back(res.teacher_run.test.acc);
            t_auc.push_back(res.teacher_run.test.auroc);
          }
          trainable = res.student_run.trainable_parameters;
          out << tag << " student test acc " << res.student_run.test.acc << " auroc " << res.student_run.test.auroc;
          if (distill) out << " teacher test acc " << res.teacher_run.test.acc;
          out << "\n";
        }
        const std::size_t tuned = finetune_parameter_count(student ? student->params : [&] {
          Rng r(cfg.seed);
          return init_model(cfg.student, r);
        }(), false);
        nlohmann::json summary = {{"loss", loss},
                                  {"mode", dc.frozen ? "frozen" : "tuned"},
                                  {"seeds", k},
                                  {"base_seed", cfg.seed},
                                  {"student", {{"acc", mean_std(s_acc)}, {"auroc", mean_std(s_auc)}}},
                                  {"trainable_parameters", trainable},
                                  {"tuned_parameters", tuned},
                                  {"trainable_fraction", static_cast<double>(trainable) / static_cast<double>(tuned)}};
        if (distill) summary["teacher"] = {{"acc", mean_std(t_acc)}, {"auroc", mean_std(t_auc)}};
        write_json_file(detail::join(cfg.output_dir, "summary.json"), summary);
        out << "wrote " << k << " metrics files and summary.json to " << cfg.output_dir << "\n";
        return kExitOk;
      },
      err);
}

// ---------------------------------------------------------------- gtd oracle

/// One randomly drawn pair-selection problem.
struct GtdInstance {
  Tensor a_h, a_l;
  NodePartition part;
  double theta = 0.3;
  Tensor teacher_emb, student_emb;
  KernelSpec kernel;
};

inline GtdInstance random_gtd_instance(std::uint64_t seed, std::size_t max_nodes) {
  Rng rng(seed);
  GtdInstance in;
  const std::size_t m = 2 + rng.below(max_nodes - 1);
  auto sym = [&](std::size_t n, double density) {
    Tensor a = Tensor::zeros(n, n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (rng.uniform() < density) a(i, j) = a(j, i) = rng.uniform();
    return a;
  };
  in.a_h = sym(m, 0.2 + 0.7 * rng.uniform());
  std::vector<std::size_t> keep;
  if (seed % 4 == 0) {
    for (std::size_t i = 0; i < m; ++i) keep.push_back(i);
  } else {
    const auto perm = rng.permutation(m);
    const std::size_t n = 1 + rng.below(m);
    keep.assign(perm.begin(), perm.begin() + static_cast<long>(n));
  }
  const std::size_t n = keep.size();
  in.part.v_l = keep;
  for (std::size_t i = 0; i < m; ++i) {
    in.part.v_h.push_back(i);
    if (std::find(keep.begin(), keep.end(), i) == keep.end()) in.part.v_d.push_back(i);
  }
  in.a_l = seed % 5 == 0 ? Tensor::zeros(n, n) : sym(n, 0.2 + 0.7 * rng.uniform());
  in.theta = 0.9 * rng.uniform();
  const std::size_t D = 4;
  in.teacher_emb = Tensor::zeros(m, D);
  in.student_emb = Tensor::zeros(n, D);
  for (double& v : in.teacher_emb.values) v = 0.5 * rng.normal();
  for (double& v : in.student_emb.values) v = 0.5 * rng.normal();
  const KernelKind kinds[] = {KernelKind::Linear, KernelKind::Euclidean, KernelKind::Polynomial, KernelKind::Rbf};
  in.kernel.kind = kinds[seed % 4 == 0 ? (seed / 4) % 4 : seed % 4];
  return in;
}

namespace oracle {

inline std::vector<std::vector<int>> binarize(const Tensor& a, double theta) {
  const std::size_t n = a.rows();
  std::vector<double> off;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j) off.push_back(a(i, j));
  std::vector<std::vector<int>> b(n, std::vector<int>(n, 0));
  if (off.empty()) return b;
  const double lo = *std::min_element(off.begin(), off.end()), hi = *std::max_element(off.begin(), off.end());
  if (hi == lo) return b;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i != j && (a(i, j) - lo) / (hi - lo) > theta) b[i][j] = 1;
  return b;
}

/// Exhaustive enumeration: every retained pair, every deleted mediator.
/// `skip_last_mediator` reproduces an off-by-one in the two-hop scan.
inline PairSets select_pairs(const GtdInstance& in, bool skip_last_mediator = false) {
  const auto bh = binarize(in.a_h, in.theta), bl = binarize(in.a_l, in.theta);
  const auto& vl = in.part.v_l;
  std::size_t mediators = in.part.v_d.size();
  if (skip_last_mediator && mediators > 0) --mediators;
  PairSets ps;
  for (std::size_t i = 0; i < vl.size(); ++i)
    for (std::size_t j = i + 1; j < vl.size(); ++j) {
      bool pos = bh[vl[i]][vl[j]] != 0;
      for (std::size_t t = 0; t < mediators && !pos; ++t) {
        const std::size_t k = in.part.v_d[t];
        pos = bh[vl[i]][k] && bh[k][vl[j]];
      }
      if (pos)
        ps.positives.push_back({i, j});
      else if (bl[i][j])
        ps.negatives.push_back({i, j});
    }
  return ps;
}

inline double kernel(const Tensor& e, std::size_t i, const Tensor& f, std::size_t j, const KernelSpec& k) {
  double dot = 0, sq = 0;
  for (std::size_t c = 0; c < e.cols(); ++c) {
    dot += e(i, c) * f(j, c);
    sq += (e(i, c) - f(j, c)) * (e(i, c) - f(j, c));
  }
  switch (k.kind) {
    case KernelKind::Linear: return dot;
    case KernelKind::Euclidean: return std::sqrt(sq);
    case KernelKind::Polynomial: return std::pow(dot + k.c, k.deg);
    case KernelKind::Rbf: return std::exp(-k.gamma * sq);
  }
  return 0;
}

/// KL between softmaxes via log-sum-exp, averaged over the set.
inline double set_divergence(const std::vector<double>& zs, const std::vector<double>& zt) {
  auto lse = [](const std::vector<double>& z) {
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0;
    for (double v : z) s += std::exp(v - mx);
    return mx + std::log(s);
  };
  const double ls = lse(zs), lt = lse(zt);
  double kl = 0;
  for (std::size_t i = 0; i < zs.size(); ++i) kl += std::exp(zs[i] - ls) * ((zs[i] - ls) - (zt[i] - lt));
  return kl / static_cast<double>(zs.size());
}

inline double gtd(const GtdInstance& in, const PairSets& ps, double eps) {
  if (ps.positives.empty()) return 0.0;
  auto z = [&](const std::vector<Edge>& pairs, bool teacher) {
    std::vector<double> out;
    for (auto [i, j] : pairs)
      out.push_back(teacher ? kernel(in.teacher_emb, in.part.v_l[i], in.teacher_emb, in.part.v_l[j], in.kernel)
                            : kernel(in.student_emb, i, in.student_emb, j, in.kernel));
    return out;
  };
  const double lpos = set_divergence(z(ps.positives, false), z(ps.positives, true));
  const double lneg = ps.negatives.empty() ? 0.0 : set_divergence(z(ps.negatives, false), z(ps.negatives, true));
  return lpos / (lneg + eps);
}

}  // namespace oracle

inline nlohmann::json to_json(const GtdInstance& in) {
  auto rows = [](const Tensor& t) {
    std::vector<std::vector<double>> r(t.rows(), std::vector<double>(t.cols()));
    for (std::size_t i = 0; i < t.rows(); ++i)
      for (std::size_t j = 0; j < t.cols(); ++j) r[i][j] = t(i, j);
    return r;
  };
  return {{"a_h", rows(in.a_h)},          {"a_l", rows(in.a_l)},
          {"v_l", in.part.v_l},           {"v_d", in.part.v_d},
          {"theta", in.theta},            {"kernel", to_string(in.kernel.kind)},
          {"teacher_emb", rows(in.teacher_emb)}, {"student_emb", rows(in.student_emb)}};
}

inline nlohmann::json to_json(const std::vector<Edge>& pairs) {
  nlohmann::json j = nlohmann::json::array();
  for (auto [a, b] : pairs) j.push_back({a, b});
  return j;
}

struct OracleOptions {
  std::size_t seeds = 200;
  std::size_t max_nodes = 12;
  bool inject_fault = false;  // library side uses the off-by-one selector
};

inline int cmd_gtd_oracle(const OracleOptions& opt, std::ostream& out, std::ostream& err) {
  return run_command(
      [&] {
        if (opt.seeds < 1) throw ConfigError("--seeds must be at least 1");
        if (opt.max_nodes < 2 || opt.max_nodes > 14) throw ConfigError("--max-nodes must be in [2, 14]");
        std::size_t h2h = 0, no_neg = 0, pairs_total = 0;
        for (std::uint64_t s = 0; s < opt.seeds; ++s) {
          const auto in = random_gtd_instance(s, opt.max_nodes);
          const auto want = oracle::select_pairs(in);
          const auto got = opt.inject_fault ? oracle::select_pairs(in, true)
                                            : select_pairs(in.a_h, in.a_l, in.part, in.theta);
          auto fail = [&](const std::string& what, nlohmann::json detail) {
            nlohmann::json report = {{"seed", s}, {"mismatch", what}, {"instance", to_json(in)}, {"detail", detail}};
            out << "FAIL " << what << " on seed " << s << "\n" << report.dump(2) << "\n";
            return kExitVerify;
          };
          if (got.positives != want.positives || got.negatives != want.negatives)
            return fail("pairs", {{"expected_positives", to_json(want.positives)},
                                  {"got_positives", to_json(got.positives)},
                                  {"expected_negatives", to_json(want.negatives)},
                                  {"got_negatives", to_json(got.negatives)}});
          DistillConfig dc;
          dc.kernel = in.kernel;
          Tape tape;
          const double lib = gtd_loss(tape.constant(in.student_emb), in.teacher_emb, got, in.part, dc).item();
          const double ref = oracle::gtd(in, want, dc.eps);
          if (!(std::abs(lib - ref) <= 1e-10 * std::max(1.0, std::abs(ref))))
            return fail("loss", {{"expected", ref}, {"got", lib}});
          h2h += in.part.v_d.empty();
          no_neg += want.negatives.empty() && !want.positives.empty();
          pairs_total += want.positives.size() + want.negatives.size();
        }
        out << "PASS " << opt.seeds << " instances (" << h2h << " H2H, " << no_neg << " without negatives, "
            << pairs_total << " pairs)\n";
        return kExitOk;
      },
      err);
}

// ---------------------------------------------------------------- eval

struct EvalOptions {
  std::string student;
  std::string dataset;
  std::string split = "test";  // test | all
};

inline nlohmann::json eval_metrics(const ExperimentConfig& cfg, EvalOptions opt) {
  if (opt.dataset.empty()) opt.dataset = cfg.dataset;
  if (opt.split != "test" && opt.split != "all") throw ConfigError("--split must be test or all");
  const auto data = load_dataset(opt.dataset);
  const Checkpoint ck = detail::load_checkpoint_or_data_error(opt.student);
  if (data.graphs.empty()) throw DataError("dataset " + opt.dataset + " has no samples");
  const std::size_t d = data.graphs.front().d();
  if (ck.config.in_dim != d)
    throw ConfigError("student expects " + std::to_string(ck.config.in_dim) + " features per node, dataset has " +
                      std::to_string(d));
  const auto keep = cfg.keep();
  for (const auto& g : data.graphs)
    for (auto id : keep)
      if (std::find(g.node_ids.begin(), g.node_ids.end(), id) == g.node_ids.end())
        throw ConfigError("dataset montage lacks electrode " + std::to_string(id) + " of the student keep-set");
  const auto ft = make_finetune_data(data.graphs, keep);
  for (const auto& g : ft.ld)
    for (auto id : g.node_ids)
      if (ck.config.position_embedding && id >= ck.config.n_positions)
        throw ConfigError("electrode id beyond the student's position table");
  std::vector<std::size_t> idx;
  if (opt.split == "all") {
    for (std::size_t i = 0; i < ft.ld.size(); ++i) idx.push_back(i);
  } else {
    idx = split_by_subject(data.graphs, cfg.seed).test;
  }
  if (idx.empty()) throw DataError("evaluation split is empty");
  std::vector<FinetuneSample> samples;
  for (const auto& g : ft.ld) samples.push_back({&g, nullptr, nullptr});
  DistillConfig dc;
  dc.set_loss("ce");
  dc.threads = worker_threads();
  const auto m = evaluate(ck.params, ck.config, samples, idx, dc);
  return {{"split", opt.split}, {"samples", idx.size()}, {"ce", m.loss.ce}, {"acc", m.acc}, {"auroc", m.auroc}};
}

inline int cmd_eval(const ExperimentConfig& cfg, const EvalOptions& opt, std::ostream& out, std::ostream& err) {
  return run_command(
      [&] {
        out << eval_metrics(cfg, opt).dump(2) << "\n";
        return kExitOk;
      },
      err);
}

}  // namespace disgcmae
