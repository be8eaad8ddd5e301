// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include <json.hpp>

#include "disgcmae/dataset.hpp"
#include "disgcmae/distill.hpp"
#include "disgcmae/encoders.hpp"
#include "disgcmae/pretrain.hpp"

namespace disgcmae {

/// Invalid or inconsistent configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Small encoders that keep the full pipeline within minutes on one core.
inline EncoderConfig desk_teacher() {
  EncoderConfig c;
  c.tier = "desk";
  c.layers = 2;
  c.hidden = 32;
  c.heads = 4;
  c.contrastive_dim = 32;
  return c;
}

inline EncoderConfig desk_student() {
  EncoderConfig c = desk_teacher();
  c.hidden = 16;
  return c;
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string dataset = "data/synth";
  CorpusSpec corpus;
  std::size_t hd_channels = 64;
  std::size_t ld_channels = 16;
  std::string keep_set;  // JSON array file; empty = evenly spread ld_channels
  EncoderConfig teacher = desk_teacher();
  EncoderConfig student = desk_student();
  PretrainConfig pretrain;
  DistillConfig distill;
  std::string loss = "union";
  std::size_t finetune_seeds = 5;
  std::string output_dir = "out";

  ExperimentConfig() {
    corpus.synth = SynthSpec::for_channels(64);
    corpus.synth.duration_s = 60;
    corpus.synth.n_subjects = 167;
    corpus.synth.freq_jitter_hz = 1.5;
    corpus.synth.noise_gain_spread = 0.3;
    corpus.window_s = 20;
    corpus.overlap_s = 10;
  }

  bool h2h() const { return ld_channels == hd_channels; }

  std::vector<std::size_t> keep() const {
    if (!keep_set.empty()) return load_keep_set(keep_set);
    return spread_keep_set(hd_channels, ld_channels);
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (corpus.synth.channels != hd_channels)
      fail("corpus channels (" + std::to_string(corpus.synth.channels) + ") differ from hd_channels (" +
           std::to_string(hd_channels) + ")");
    if (ld_channels == 0 || ld_channels > hd_channels) fail("ld_channels must be in [1, hd_channels]");
    if (!keep_set.empty() && !std::filesystem::exists(keep_set)) fail("keep-set file " + keep_set + " does not exist");
    if (teacher.in_dim != corpus.n_bins || student.in_dim != corpus.n_bins)
      fail("encoder in_dim must equal corpus n_bins (" + std::to_string(corpus.n_bins) + ")");
    if (teacher.contrastive_dim != student.contrastive_dim) fail("teacher and student contrastive dims differ");
    if (teacher.n_positions < hd_channels || student.n_positions < hd_channels)
      fail("position table smaller than the HD montage");
    try {
      teacher.validate();
      student.validate();
      pretrain.validate();
      distill.validate();
      corpus.synth.validate();
      DistillConfig probe;
      probe.set_loss(loss);
    } catch (const ContractViolation& e) {
      fail(e.what());
    }
    if (!keep_set.empty()) {
      const auto k = keep();
      if (k.size() != ld_channels)
        fail("keep-set has " + std::to_string(k.size()) + " entries, ld_channels is " + std::to_string(ld_channels));
      for (auto i : k)
        if (i >= hd_channels) fail("keep-set index " + std::to_string(i) + " outside the HD montage");
    }
  }
};

inline nlohmann::json to_json(const AdamConfig& a) {
  return {{"lr", a.lr}, {"beta1", a.beta1}, {"beta2", a.beta2}, {"eps", a.eps}};
}

inline AdamConfig adam_from_json(const nlohmann::json& j, AdamConfig a) {
  a.lr = j.value("lr", a.lr);
  a.beta1 = j.value("beta1", a.beta1);
  a.beta2 = j.value("beta2", a.beta2);
  a.eps = j.value("eps", a.eps);
  return a;
}

inline nlohmann::json to_json(const PretrainConfig& p) {
  return {{"temperature", p.temperature}, {"queue_capacity", p.queue_capacity}, {"momentum", p.momentum},
          {"node_drop", p.node_drop},     {"edge_drop", p.edge_drop},           {"batch_size", p.batch_size},
          {"epochs", p.epochs},           {"adam", to_json(p.adam)},            {"w_cl_t", p.w_cl_t},
          {"w_cl_s", p.w_cl_s},           {"w_rec_t", p.w_rec_t},               {"w_rec_s", p.w_rec_s}};
}

inline PretrainConfig pretrain_from_json(const nlohmann::json& j, PretrainConfig p) {
  p.temperature = j.value("temperature", p.temperature);
  p.queue_capacity = j.value("queue_capacity", p.queue_capacity);
  p.momentum = j.value("momentum", p.momentum);
  p.node_drop = j.value("node_drop", p.node_drop);
  p.edge_drop = j.value("edge_drop", p.edge_drop);
  p.batch_size = j.value("batch_size", p.batch_size);
  p.epochs = j.value("epochs", p.epochs);
  if (j.contains("adam")) p.adam = adam_from_json(j.at("adam"), p.adam);
  p.w_cl_t = j.value("w_cl_t", p.w_cl_t);
  p.w_cl_s = j.value("w_cl_s", p.w_cl_s);
  p.w_rec_t = j.value("w_rec_t", p.w_rec_t);
  p.w_rec_s = j.value("w_rec_s", p.w_rec_s);
  return p;
}

inline nlohmann::json to_json(const DistillConfig& d) {
  return {{"kernel", {{"kind", to_string(d.kernel.kind)}, {"c", d.kernel.c}, {"deg", d.kernel.deg}, {"gamma", d.kernel.gamma}}},
          {"eps", d.eps},
          {"theta", d.theta},
          {"temperature", d.temperature},
          {"w_ce", d.w_ce},
          {"w_kd", d.w_kd},
          {"w_gtd", d.w_gtd},
          {"mode", d.frozen ? "frozen" : "tuned"},
          {"batch_size", d.batch_size},
          {"max_epochs", d.max_epochs},
          {"patience", d.patience},
          {"adam", to_json(d.adam)}};
}

inline DistillConfig distill_from_json(const nlohmann::json& j, DistillConfig d) {
  if (j.contains("kernel")) {
    const auto& k = j.at("kernel");
    if (k.contains("kind")) d.kernel.kind = kernel_from_string(k.at("kind").get<std::string>());
    d.kernel.c = k.value("c", d.kernel.c);
    d.kernel.deg = k.value("deg", d.kernel.deg);
    d.kernel.gamma = k.value("gamma", d.kernel.gamma);
  }
  d.eps = j.value("eps", d.eps);
  d.theta = j.value("theta", d.theta);
  d.temperature = j.value("temperature", d.temperature);
  d.w_ce = j.value("w_ce", d.w_ce);
  d.w_kd = j.value("w_kd", d.w_kd);
  d.w_gtd = j.value("w_gtd", d.w_gtd);
  if (j.contains("mode")) {
    const auto m = j.at("mode").get<std::string>();
    if (m != "tuned" && m != "frozen") throw ConfigError("mode must be tuned or frozen, got '" + m + "'");
    d.frozen = m == "frozen";
  }
  d.batch_size = j.value("batch_size", d.batch_size);
  d.max_epochs = j.value("max_epochs", d.max_epochs);
  d.patience = j.value("patience", d.patience);
  if (j.contains("adam")) d.adam = adam_from_json(j.at("adam"), d.adam);
  return d;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"dataset", c.dataset},
          {"corpus", to_json(c.corpus)},
          {"hd_channels", c.hd_channels},
          {"ld_channels", c.ld_channels},
          {"keep_set", c.keep_set},
          {"teacher", to_json(c.teacher)},
          {"student", to_json(c.student)},
          {"pretrain", to_json(c.pretrain)},
          {"distill", to_json(c.distill)},
          {"loss", c.loss},
          {"finetune_seeds", c.finetune_seeds},
          {"output_dir", c.output_dir}};
}

/// Keys absent from `j` keep their defaults.
inline ExperimentConfig experiment_from_json(const nlohmann::json& j) {
  ExperimentConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    c.dataset = j.value("dataset", c.dataset);
    if (j.contains("corpus")) c.corpus = corpus_spec_from_json(j.at("corpus"), c.corpus);
    c.hd_channels = j.value("hd_channels", c.corpus.synth.channels);
    c.ld_channels = j.value("ld_channels", c.ld_channels);
    c.keep_set = j.value("keep_set", c.keep_set);
    if (j.contains("teacher")) c.teacher = encoder_config_from_json(j.at("teacher"), c.teacher);
    if (j.contains("student")) c.student = encoder_config_from_json(j.at("student"), c.student);
    if (j.contains("pretrain")) c.pretrain = pretrain_from_json(j.at("pretrain"), c.pretrain);
    if (j.contains("distill")) c.distill = distill_from_json(j.at("distill"), c.distill);
    c.loss = j.value("loss", c.loss);
    c.finetune_seeds = j.value("finetune_seeds", c.finetune_seeds);
    c.output_dir = j.value("output_dir", c.output_dir);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  } catch (const ContractViolation& e) {
    throw ConfigError(e.what());
  }
  return c;
}

inline ExperimentConfig load_experiment(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed config " + path + ": " + e.what());
  }
  return experiment_from_json(j);
}

}  // namespace disgcmae
