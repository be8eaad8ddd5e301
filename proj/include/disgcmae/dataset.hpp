// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "disgcmae/checkpoint.hpp"
#include "disgcmae/eeg_synth.hpp"
#include "disgcmae/graph.hpp"

namespace disgcmae {

/// How recordings become graph samples.
struct CorpusSpec {
  SynthSpec synth = SynthSpec::for_channels(64);
  std::string band = "alpha";
  std::size_t n_bins = 8;
  double adjacency_threshold = 0.3;
  double window_s = 50.0;
  double overlap_s = 20.0;
  bool include_full = true;  // append the whole recording as one more sample

  std::size_t samples_per_subject() const {
    return segment_count(synth.duration_s, window_s, overlap_s) + (include_full ? 1 : 0);
  }
};

inline nlohmann::json to_json(const SynthSpec& s) {
  return {{"n_subjects", s.n_subjects},
          {"channels", s.channels},
          {"fs", s.fs},
          {"duration_s", s.duration_s},
          {"source_freq_hz", s.source_freq_hz},
          {"source_amplitude", s.source_amplitude},
          {"phase_jitter", s.phase_jitter},
          {"group_a", s.group_a},
          {"group_b", s.group_b},
          {"bridge", s.bridge},
          {"coupling_strength", s.coupling_strength},
          {"coupling_jitter", s.coupling_jitter},
          {"bridge_leak", s.bridge_leak},
          {"pink_noise_amplitude", s.pink_noise_amplitude},
          {"freq_jitter_hz", s.freq_jitter_hz},
          {"noise_gain_spread", s.noise_gain_spread},
          {"null_task", s.null_task}};
}

/// Missing keys keep the values of `base`; a changed channel count without
/// explicit groups re-derives the default layout.
inline SynthSpec synth_spec_from_json(const nlohmann::json& j, SynthSpec base = SynthSpec::for_channels(64)) {
  if (j.contains("channels") && j.at("channels").get<std::size_t>() != base.channels) {
    const SynthSpec fresh = SynthSpec::for_channels(j.at("channels").get<std::size_t>());
    base.channels = fresh.channels;
    base.group_a = fresh.group_a;
    base.group_b = fresh.group_b;
    base.bridge = fresh.bridge;
  }
  base.n_subjects = j.value("n_subjects", base.n_subjects);
  base.fs = j.value("fs", base.fs);
  base.duration_s = j.value("duration_s", base.duration_s);
  base.source_freq_hz = j.value("source_freq_hz", base.source_freq_hz);
  base.source_amplitude = j.value("source_amplitude", base.source_amplitude);
  base.phase_jitter = j.value("phase_jitter", base.phase_jitter);
  base.group_a = j.value("group_a", base.group_a);
  base.group_b = j.value("group_b", base.group_b);
  base.bridge = j.value("bridge", base.bridge);
  base.coupling_strength = j.value("coupling_strength", base.coupling_strength);
  base.coupling_jitter = j.value("coupling_jitter", base.coupling_jitter);
  base.bridge_leak = j.value("bridge_leak", base.bridge_leak);
  base.pink_noise_amplitude = j.value("pink_noise_amplitude", base.pink_noise_amplitude);
  base.freq_jitter_hz = j.value("freq_jitter_hz", base.freq_jitter_hz);
  base.noise_gain_spread = j.value("noise_gain_spread", base.noise_gain_spread);
  base.null_task = j.value("null_task", base.null_task);
  return base;
}

inline nlohmann::json to_json(const CorpusSpec& c) {
  return {{"synth", to_json(c.synth)},   {"band", c.band},           {"n_bins", c.n_bins},
          {"theta_a", c.adjacency_threshold}, {"window_s", c.window_s}, {"overlap_s", c.overlap_s},
          {"include_full", c.include_full}};
}

inline CorpusSpec corpus_spec_from_json(const nlohmann::json& j, CorpusSpec base = {}) {
  if (j.contains("synth")) base.synth = synth_spec_from_json(j.at("synth"), base.synth);
  base.band = j.value("band", base.band);
  base.n_bins = j.value("n_bins", base.n_bins);
  base.adjacency_threshold = j.value("theta_a", base.adjacency_threshold);
  base.window_s = j.value("window_s", base.window_s);
  base.overlap_s = j.value("overlap_s", base.overlap_s);
  base.include_full = j.value("include_full", base.include_full);
  return base;
}

/// Subject s of class c gets id "c<c>-s<s>" and recording seed derived from (seed, c, s).
inline std::vector<EegGraph> generate_corpus(const CorpusSpec& spec, std::uint64_t seed) {
  spec.synth.validate();
  const Band band = band_by_name(spec.band);
  std::vector<EegGraph> out;
  Rng root(seed);
  for (std::size_t s = 0; s < spec.synth.n_subjects; ++s)
    for (int c = 0; c < 2; ++c) {
      Recording rec = generate_recording(spec.synth, c, root.derive(static_cast<std::uint64_t>(c)).derive(s).next_u64());
      rec.subject_id = "c" + std::to_string(c) + "-s" + std::to_string(s);
      for (const auto& seg : segment(rec, spec.window_s, spec.overlap_s))
        out.push_back(build_graph(seg, band, spec.n_bins, spec.adjacency_threshold));
      if (spec.include_full) out.push_back(build_graph(rec, band, spec.n_bins, spec.adjacency_threshold));
    }
  return out;
}

inline nlohmann::json to_json(const EegGraph& g) {
  auto rows = [](const Tensor& t) {
    nlohmann::json m = nlohmann::json::array();
    for (std::size_t i = 0; i < t.rows(); ++i) {
      nlohmann::json r = nlohmann::json::array();
      for (std::size_t j = 0; j < t.cols(); ++j) r.push_back(t(i, j));
      m.push_back(std::move(r));
    }
    return m;
  };
  return {{"x", rows(g.x)},
          {"a", rows(g.a)},
          {"node_ids", g.node_ids},
          {"label", g.label ? nlohmann::json(*g.label) : nlohmann::json(nullptr)},
          {"subject_id", g.subject_id},
          {"density_tier", to_string(g.tier)}};
}

inline EegGraph graph_from_json(const nlohmann::json& j) {
  auto matrix = [](const nlohmann::json& m) {
    const auto rows = m.get<std::vector<std::vector<double>>>();
    const std::size_t c = rows.empty() ? 0 : rows[0].size();
    Tensor t = Tensor::zeros(rows.size(), c);
    for (std::size_t i = 0; i < rows.size(); ++i) {
      require(rows[i].size() == c, "ragged matrix");
      std::copy(rows[i].begin(), rows[i].end(), t.values.begin() + static_cast<long>(i * c));
    }
    return t;
  };
  EegGraph g;
  g.x = matrix(j.at("x"));
  g.a = matrix(j.at("a"));
  if (j.contains("node_ids")) {
    g.node_ids = j.at("node_ids").get<std::vector<std::size_t>>();
  } else {
    for (std::size_t i = 0; i < g.n(); ++i) g.node_ids.push_back(i);
  }
  if (!j.at("label").is_null()) g.label = j.at("label").get<int>();
  g.subject_id = j.at("subject_id").get<std::string>();
  g.tier = tier_from_string(j.at("density_tier").get<std::string>());
  g.validate();
  return g;
}

inline std::string sample_file_name(std::size_t k) { return "sample_" + std::to_string(k) + ".json"; }

inline void write_json_file(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot write " + p.string());
  out << j.dump() << "\n";
  if (!out) throw IoError("failed writing " + p.string());
}

inline void save_dataset(const std::string& dir, const std::vector<EegGraph>& graphs, const CorpusSpec& spec,
                         std::uint64_t seed) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());
  std::size_t subjects = 0;
  {
    std::vector<std::string> ids;
    for (const auto& g : graphs) ids.push_back(g.subject_id);
    std::sort(ids.begin(), ids.end());
    subjects = static_cast<std::size_t>(std::unique(ids.begin(), ids.end()) - ids.begin());
  }
  nlohmann::json files = nlohmann::json::array();
  for (std::size_t k = 0; k < graphs.size(); ++k) {
    write_json_file(std::filesystem::path(dir) / sample_file_name(k), to_json(graphs[k]));
    files.push_back(sample_file_name(k));
  }
  nlohmann::json manifest = {{"spec", to_json(spec)},
                             {"seed", seed},
                             {"counts", {{"samples", graphs.size()}, {"subjects", subjects}}},
                             {"montage", default_montage(spec.synth.channels)},
                             {"band", spec.band},
                             {"theta_a", spec.adjacency_threshold},
                             {"samples", files}};
  write_json_file(std::filesystem::path(dir) / "manifest.json", manifest);
}

struct Dataset {
  CorpusSpec spec;
  std::uint64_t seed = 0;
  std::vector<EegGraph> graphs;
};

inline nlohmann::json read_json_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  if (!in) throw IoError("cannot open " + p.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + p.string() + ": " + e.what());
  }
}

inline Dataset load_dataset(const std::string& dir) {
  const std::filesystem::path root(dir);
  if (!std::filesystem::is_directory(root)) throw DataError("dataset directory " + dir + " does not exist");
  const auto manifest_path = root / "manifest.json";
  if (!std::filesystem::exists(manifest_path)) throw DataError("dataset " + dir + " has no manifest.json");
  const auto manifest = read_json_file(manifest_path);
  Dataset d;
  try {
    d.spec = corpus_spec_from_json(manifest.at("spec"));
    d.seed = manifest.at("seed").get<std::uint64_t>();
    for (const auto& f : manifest.at("samples")) {
      const auto p = root / f.get<std::string>();
      try {
        d.graphs.push_back(graph_from_json(read_json_file(p)));
      } catch (const IoError& e) {
        throw DataError(std::string("missing sample file: ") + e.what());
      } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed sample " + p.string() + ": " + e.what());
      } catch (const ContractViolation& e) {
        throw DataError("invalid sample " + p.string() + ": " + e.what());
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }
  return d;
}

}  // namespace disgcmae
