// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <complex>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "disgcmae/graph.hpp"
#include "disgcmae/rng.hpp"
#include "disgcmae/tensor.hpp"

namespace disgcmae {

/// Multichannel time series, channels x timepoints.
struct Recording {
  Tensor samples;
  double fs = 250.0;
  std::vector<std::string> montage_labels;
  std::string subject_id;
  std::optional<int> label;

  std::size_t channels() const { return samples.rows(); }
  std::size_t timepoints() const { return samples.cols(); }
  double duration_s() const { return static_cast<double>(timepoints()) / fs; }

  void validate() const {
    require(fs > 0, "Recording: sampling rate must be positive");
    require(channels() == montage_labels.size(), "Recording: montage label count mismatch");
    require(static_cast<double>(timepoints()) >= fs, "Recording: shorter than one second");
  }
};

struct Band {
  std::string name;
  double lo_hz = 0;
  double hi_hz = 0;

  void validate(double fs) const {
    require(lo_hz > 0 && lo_hz < hi_hz && hi_hz < fs / 2.0, [&] { return "Band '" + name + "' [" + std::to_string(lo_hz) + ", " + std::to_string(hi_hz) +
                "] Hz is not inside (0, fs/2) for fs=" + std::to_string(fs); });
  }
};

inline const Band kThetaBand{"theta", 4.0, 8.0};
inline const Band kAlphaBand{"alpha", 8.0, 14.0};
inline const Band kBetaBand{"beta", 14.0, 30.0};
inline const Band kGammaBand{"gamma", 30.0, 50.0};

inline Band band_by_name(const std::string& name) {
  for (const Band* b : {&kThetaBand, &kAlphaBand, &kBetaBand, &kGammaBand})
    if (b->name == name) return *b;
  throw ContractViolation("unknown band '" + name + "'");
}

inline std::vector<std::string> default_montage(std::size_t channels) {
  std::vector<std::string> labels;
  for (std::size_t i = 0; i < channels; ++i) labels.push_back("E" + std::to_string(i));
  return labels;
}

/// Generator settings for the synthetic stand-in corpus.
///
/// Group A always carries a shared alpha-band source. For a recording of
/// class c the source reaches group B with gain coupling_strength[c]: bridge
/// channels of B at full gain, the other B channels at bridge_leak of it.
struct SynthSpec {
  std::size_t n_subjects = 20;  // per class
  std::size_t channels = 64;
  double fs = 250.0;
  double duration_s = 200.0;
  double source_freq_hz = 10.0;
  double source_amplitude = 1.0;
  double phase_jitter = 0.02;  // rad per sample, random walk
  std::vector<std::size_t> group_a;
  std::vector<std::size_t> group_b;
  std::vector<std::size_t> bridge;
  std::array<double, 2> coupling_strength{0.0, 0.8};
  double coupling_jitter = 0.0;
  double bridge_leak = 0.5;
  double pink_noise_amplitude = 1.0;
  // Per-recording variability: source frequency drawn from
  // source_freq_hz +- freq_jitter_hz, per-channel noise gain exp(noise_gain_spread * N(0,1)).
  double freq_jitter_hz = 0.0;
  double noise_gain_spread = 0.0;
  // Both classes share one coupling value (label-independent control data).
  bool null_task = false;

  /// Groups laid out for a channel count: A = first quarter, B = third
  /// quarter, bridge = the B channels not on the every-fourth grid (so an
  /// evenly spread quarter-density montage loses them).
  static SynthSpec for_channels(std::size_t channels) {
    SynthSpec s;
    s.channels = channels;
    const std::size_t q = channels / 4;
    for (std::size_t i = 0; i < q; ++i) s.group_a.push_back(i);
    for (std::size_t i = 2 * q; i < 3 * q; ++i) {
      s.group_b.push_back(i);
      if (i % 4 != 0) s.bridge.push_back(i);
    }
    return s;
  }

  void validate() const {
    require(channels >= 2, "SynthSpec: need at least two channels");
    require(fs > 0 && duration_s * fs >= fs, "SynthSpec: need at least one second of signal");
    std::vector<char> in_a(channels, 0), in_b(channels, 0);
    for (auto i : group_a) {
      require(i < channels, "SynthSpec: group A index out of range");
      in_a[i] = 1;
    }
    for (auto i : group_b) {
      require(i < channels, "SynthSpec: group B index out of range");
      require(!in_a[i], "SynthSpec: groups A and B intersect");
      in_b[i] = 1;
    }
    for (auto i : bridge)
      require(i < channels && (in_a[i] || in_b[i]), "SynthSpec: bridge not inside A or B");
    require(freq_jitter_hz >= 0 && noise_gain_spread >= 0, "SynthSpec: variability must be nonnegative");
    require(source_freq_hz - freq_jitter_hz > 0 && source_freq_hz + freq_jitter_hz < fs / 2,
            "SynthSpec: source frequency range outside (0, fs/2)");
    require(coupling_strength[0] >= 0.0, "SynthSpec: coupling must be nonnegative");
    if (null_task)
      require(coupling_strength[1] == coupling_strength[0], "SynthSpec: null task needs equal couplings");
    else
      require(coupling_strength[1] > coupling_strength[0], "SynthSpec: need coupling(class 1) > coupling(class 0)");
  }
};

namespace detail {

/// 1/f noise via a three-pole shaping filter (Kellett), normalised to unit std.
inline std::vector<double> pink_noise(std::size_t n, Rng& rng) {
  std::vector<double> out(n);
  double b0 = 0, b1 = 0, b2 = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double w = rng.normal();
    b0 = 0.99765 * b0 + w * 0.0990460;
    b1 = 0.96300 * b1 + w * 0.2965164;
    b2 = 0.57000 * b2 + w * 1.0526913;
    out[t] = b0 + b1 + b2 + w * 0.1848;
  }
  double mu = 0, ss = 0;
  for (double v : out) mu += v;
  mu /= static_cast<double>(n);
  for (double v : out) ss += (v - mu) * (v - mu);
  const double sd = std::sqrt(ss / static_cast<double>(n));
  for (double& v : out) v = sd > 0 ? (v - mu) / sd : 0.0;
  return out;
}

}  // namespace detail

inline Recording generate_recording(const SynthSpec& spec, int class_id, std::uint64_t seed) {
  spec.validate();
  require(class_id == 0 || class_id == 1, "generate_recording: class must be 0 or 1");
  Rng rng(seed);
  Rng src_rng = rng.derive(1), noise_rng = rng.derive(2), gain_rng = rng.derive(3);
  const auto T = static_cast<std::size_t>(std::llround(spec.duration_s * spec.fs));
  const std::size_t C = spec.channels;

  Rng var_rng = rng.derive(4);
  std::vector<double> source(T);
  double phase = 2.0 * std::numbers::pi * src_rng.uniform();
  const double freq = spec.source_freq_hz + (spec.freq_jitter_hz > 0 ? var_rng.uniform(-spec.freq_jitter_hz, spec.freq_jitter_hz) : 0.0);
  const double w = 2.0 * std::numbers::pi * freq / spec.fs;
  for (std::size_t t = 0; t < T; ++t) {
    source[t] = spec.source_amplitude * std::sin(w * static_cast<double>(t) + phase);
    phase += spec.phase_jitter * src_rng.normal();
  }
  double coupling = spec.coupling_strength[static_cast<std::size_t>(class_id)];
  if (spec.coupling_jitter > 0) coupling += spec.coupling_jitter * gain_rng.normal();
  coupling = std::max(0.0, coupling);

  std::vector<double> gain(C, 0.0);
  for (auto i : spec.group_b) gain[i] = coupling * spec.bridge_leak;
  for (auto i : spec.bridge) gain[i] = coupling;
  for (auto i : spec.group_a) gain[i] = 1.0;
  for (auto& g : gain)
    if (g > 0) g *= gain_rng.uniform(0.8, 1.2);

  Recording rec;
  rec.fs = spec.fs;
  rec.montage_labels = default_montage(C);
  rec.samples = Tensor::zeros(C, T);
  rec.label = class_id;
  for (std::size_t c = 0; c < C; ++c) {
    Rng ch_rng = noise_rng.derive(c);
    auto noise = detail::pink_noise(T, ch_rng);
    const double amp = spec.pink_noise_amplitude *
                       (spec.noise_gain_spread > 0 ? std::exp(spec.noise_gain_spread * var_rng.normal()) : 1.0);
    for (std::size_t t = 0; t < T; ++t) rec.samples(c, t) = gain[c] * source[t] + amp * noise[t];
  }
  return rec;
}

/// One second-order section: b0 + b1 z^-1 + b2 z^-2 over 1 + a1 z^-1 + a2 z^-2.
struct Biquad {
  double b0, b1, b2, a1, a2;
};

/// 4th-order Butterworth band-pass (8 poles) as second-order sections, via
/// prototype poles, the low-pass to band-pass map and a prewarped bilinear
/// transform; unit gain at the geometric band centre.
inline std::vector<Biquad> butterworth_bandpass(const Band& band, double fs, int order = 4) {
  band.validate(fs);
  using cd = std::complex<double>;
  const double w1 = 2.0 * fs * std::tan(std::numbers::pi * band.lo_hz / fs);
  const double w2 = 2.0 * fs * std::tan(std::numbers::pi * band.hi_hz / fs);
  const double w0sq = w1 * w2;
  const double bw = w2 - w1;
  std::vector<cd> analog;
  for (int k = 0; k < order; ++k) {
    const cd p = std::polar(1.0, std::numbers::pi * (2.0 * k + order + 1) / (2.0 * order));
    if (p.imag() < 0) continue;  // conjugates are paired per section below
    const cd pb = p * bw;
    const cd disc = std::sqrt(pb * pb - 4.0 * w0sq);
    analog.push_back((pb + disc) / 2.0);
    analog.push_back((pb - disc) / 2.0);
  }
  std::vector<Biquad> sos;
  for (const cd& s : analog) {
    const cd z = (2.0 * fs + s) / (2.0 * fs - s);
    // zeros at z = 1 and z = -1
    sos.push_back({1.0, 0.0, -1.0, -2.0 * z.real(), std::norm(z)});
  }
  // normalise at the digital image of the analog centre frequency
  const double wc = 2.0 * std::atan(std::sqrt(w0sq) / (2.0 * fs));
  const cd zc = std::polar(1.0, -wc);
  cd h = 1.0;
  for (const auto& q : sos)
    h *= (q.b0 + q.b1 * zc + q.b2 * zc * zc) / (1.0 + q.a1 * zc + q.a2 * zc * zc);
  const double g = std::pow(1.0 / std::abs(h), 1.0 / static_cast<double>(sos.size()));
  for (auto& q : sos) {
    q.b0 *= g;
    q.b1 *= g;
    q.b2 *= g;
  }
  return sos;
}

namespace detail {

inline void sos_filter_inplace(const std::vector<Biquad>& sos, std::vector<double>& x) {
  for (const auto& q : sos) {
    double z1 = 0, z2 = 0;  // transposed direct form II
    for (double& v : x) {
      const double y = q.b0 * v + z1;
      z1 = q.b1 * v - q.a1 * y + z2;
      z2 = q.b2 * v - q.a2 * y;
      v = y;
    }
  }
}

}  // namespace detail

/// Zero-phase (forward-backward) application of the band-pass to each channel,
/// with odd-reflection padding to tame edge transients.
inline Recording bandpass(const Recording& rec, const Band& band) {
  band.validate(rec.fs);
  const auto sos = butterworth_bandpass(band, rec.fs);
  Recording out = rec;
  const std::size_t T = rec.timepoints();
  const auto pad = static_cast<std::size_t>(
      std::min<double>(static_cast<double>(T) - 1.0, std::ceil(6.0 * rec.fs / (band.hi_hz - band.lo_hz))));
  std::vector<double> buf(T + 2 * pad);
  for (std::size_t c = 0; c < rec.channels(); ++c) {
    const double* x = &rec.samples.values[c * T];
    for (std::size_t i = 0; i < pad; ++i) {
      buf[pad - 1 - i] = 2.0 * x[0] - x[i + 1];
      buf[pad + T + i] = 2.0 * x[T - 1] - x[T - 2 - i];
    }
    std::copy(x, x + T, buf.begin() + static_cast<std::ptrdiff_t>(pad));
    detail::sos_filter_inplace(sos, buf);
    std::reverse(buf.begin(), buf.end());
    detail::sos_filter_inplace(sos, buf);
    std::reverse(buf.begin(), buf.end());
    std::copy(buf.begin() + static_cast<std::ptrdiff_t>(pad),
              buf.begin() + static_cast<std::ptrdiff_t>(pad + T), &out.samples.values[c * T]);
  }
  return out;
}

/// Welch estimate (2 s Hann windows, 50% overlap, mean-detrended, one-sided
/// density) evaluated at the DFT frequencies inside the band.
struct BandSpectrum {
  std::vector<double> freqs;
  Tensor psd;  // channels x freqs
};

inline BandSpectrum welch_band(const Recording& rec, const Band& band) {
  band.validate(rec.fs);
  const auto nper = static_cast<std::size_t>(std::llround(2.0 * rec.fs));
  require(rec.timepoints() >= nper, "psd: recording shorter than 2 s");
  const std::size_t step = nper / 2;
  const std::size_t T = rec.timepoints();
  const std::size_t n_seg = (T - nper) / step + 1;
  const auto k_lo = static_cast<std::size_t>(std::ceil(band.lo_hz * static_cast<double>(nper) / rec.fs));
  const auto k_hi = static_cast<std::size_t>(std::floor(band.hi_hz * static_cast<double>(nper) / rec.fs));
  require(k_hi >= k_lo, "psd: band contains no frequency bins");
  const std::size_t K = k_hi - k_lo + 1;

  std::vector<double> win(nper);
  double wss = 0;
  for (std::size_t i = 0; i < nper; ++i) {
    win[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) / static_cast<double>(nper));
    wss += win[i] * win[i];
  }
  std::vector<double> cs(K * nper), sn(K * nper);
  BandSpectrum out;
  for (std::size_t k = 0; k < K; ++k) {
    const double kk = static_cast<double>(k_lo + k);
    out.freqs.push_back(kk * rec.fs / static_cast<double>(nper));
    for (std::size_t i = 0; i < nper; ++i) {
      const double ang = 2.0 * std::numbers::pi * kk * static_cast<double>(i) / static_cast<double>(nper);
      cs[k * nper + i] = std::cos(ang) * win[i];
      sn[k * nper + i] = std::sin(ang) * win[i];
    }
  }
  out.psd = Tensor::zeros(rec.channels(), K);
  const double scale = 1.0 / (rec.fs * wss * static_cast<double>(n_seg));
  std::vector<double> seg(nper);
  for (std::size_t c = 0; c < rec.channels(); ++c) {
    const double* x = &rec.samples.values[c * T];
    for (std::size_t s = 0; s < n_seg; ++s) {
      const double* xs = x + s * step;
      double mu = 0;
      for (std::size_t i = 0; i < nper; ++i) mu += xs[i];
      mu /= static_cast<double>(nper);
      for (std::size_t i = 0; i < nper; ++i) seg[i] = xs[i] - mu;
      for (std::size_t k = 0; k < K; ++k) {
        double re = 0, im = 0;
        const double* ck = &cs[k * nper];
        const double* sk = &sn[k * nper];
        for (std::size_t i = 0; i < nper; ++i) {
          re += seg[i] * ck[i];
          im += seg[i] * sk[i];
        }
        const std::size_t kk = k_lo + k;
        const double onesided = (kk == 0 || 2 * kk == nper) ? 1.0 : 2.0;
        out.psd(c, k) += onesided * (re * re + im * im) * scale;
      }
    }
  }
  return out;
}

/// Raw band power aggregated into n_bins equal-width bins (channels x n_bins).
/// A bin with no DFT frequency inside takes the frequency nearest its centre.
inline Tensor band_power_bins(const Recording& rec, const Band& band, std::size_t n_bins) {
  require(n_bins >= 1, "psd_features: n_bins must be >= 1");
  require(rec.duration_s() >= 2.0, "psd_features: recording shorter than 2 s");
  const auto spec = welch_band(rec, band);
  const double width = (band.hi_hz - band.lo_hz) / static_cast<double>(n_bins);
  Tensor out = Tensor::zeros(rec.channels(), n_bins);
  for (std::size_t b = 0; b < n_bins; ++b) {
    const double lo = band.lo_hz + width * static_cast<double>(b);
    const double hi = lo + width;
    std::vector<std::size_t> members;
    for (std::size_t k = 0; k < spec.freqs.size(); ++k) {
      const double f = spec.freqs[k];
      if (f >= lo && (f < hi || (b + 1 == n_bins && f <= hi))) members.push_back(k);
    }
    if (members.empty()) {
      const double centre = 0.5 * (lo + hi);
      std::size_t best = 0;
      for (std::size_t k = 1; k < spec.freqs.size(); ++k)
        if (std::abs(spec.freqs[k] - centre) < std::abs(spec.freqs[best] - centre)) best = k;
      members.push_back(best);
    }
    for (std::size_t c = 0; c < rec.channels(); ++c) {
      double s = 0;
      for (auto k : members) s += spec.psd(c, k);
      out(c, b) = s / static_cast<double>(members.size());
    }
  }
  return out;
}

/// Node features: log band power per bin, each bin z-scored across channels.
inline Tensor psd_features(const Recording& rec, const Band& band, std::size_t n_bins) {
  Tensor x = band_power_bins(rec, band, n_bins);
  for (double& v : x.values) v = std::log(std::max(v, 1e-300));
  const std::size_t C = x.rows();
  for (std::size_t b = 0; b < n_bins; ++b) {
    double mu = 0;
    for (std::size_t c = 0; c < C; ++c) mu += x(c, b);
    mu /= static_cast<double>(C);
    double ss = 0;
    for (std::size_t c = 0; c < C; ++c) ss += (x(c, b) - mu) * (x(c, b) - mu);
    const double sd = std::sqrt(ss / static_cast<double>(C));
    for (std::size_t c = 0; c < C; ++c) x(c, b) = sd > 1e-12 ? (x(c, b) - mu) / sd : 0.0;
  }
  return x;
}

/// floor((total - window) / (window - overlap)) + 1
inline std::size_t segment_count(double total_s, double window_s, double overlap_s) {
  require(window_s > overlap_s && overlap_s >= 0.0, "segment: need window > overlap >= 0");
  require(total_s >= window_s, "segment: recording shorter than one window");
  return static_cast<std::size_t>(std::floor((total_s - window_s) / (window_s - overlap_s) + 1e-9)) + 1;
}

inline std::vector<Recording> segment(const Recording& rec, double window_s, double overlap_s) {
  const std::size_t count = segment_count(rec.duration_s(), window_s, overlap_s);
  const auto len = static_cast<std::size_t>(std::llround(window_s * rec.fs));
  std::vector<Recording> out;
  out.reserve(count);
  for (std::size_t k = 0; k < count; ++k) {
    auto start = static_cast<std::size_t>(std::llround(static_cast<double>(k) * (window_s - overlap_s) * rec.fs));
    start = std::min(start, rec.timepoints() - len);
    Recording seg;
    seg.fs = rec.fs;
    seg.montage_labels = rec.montage_labels;
    seg.subject_id = rec.subject_id;
    seg.label = rec.label;
    seg.samples = Tensor::zeros(rec.channels(), len);
    for (std::size_t c = 0; c < rec.channels(); ++c)
      std::copy_n(&rec.samples.values[c * rec.timepoints() + start], len, &seg.samples.values[c * len]);
    out.push_back(std::move(seg));
  }
  return out;
}

struct AdjacencyResult {
  Tensor a;
  std::vector<std::size_t> zero_variance_channels;
};

/// |Pearson r| between every pair of channels; zero diagonal. Channels with
/// no variance get all-zero rows and are reported.
inline AdjacencyResult pearson_adjacency(const Recording& filtered) {
  const std::size_t C = filtered.channels(), T = filtered.timepoints();
  require(T >= 2, "pearson_adjacency: need at least two timepoints");
  std::vector<double> centred(C * T);
  std::vector<double> norm(C);
  AdjacencyResult out;
  for (std::size_t c = 0; c < C; ++c) {
    const double* x = &filtered.samples.values[c * T];
    double mu = 0;
    for (std::size_t t = 0; t < T; ++t) mu += x[t];
    mu /= static_cast<double>(T);
    double ss = 0;
    for (std::size_t t = 0; t < T; ++t) {
      centred[c * T + t] = x[t] - mu;
      ss += (x[t] - mu) * (x[t] - mu);
    }
    norm[c] = std::sqrt(ss);
    if (!(norm[c] > 0)) out.zero_variance_channels.push_back(c);
  }
  out.a = Tensor::zeros(C, C);
  for (std::size_t i = 0; i < C; ++i) {
    if (!(norm[i] > 0)) continue;
    for (std::size_t j = i + 1; j < C; ++j) {
      if (!(norm[j] > 0)) continue;
      double s = 0;
      const double* xi = &centred[i * T];
      const double* xj = &centred[j * T];
      for (std::size_t t = 0; t < T; ++t) s += xi[t] * xj[t];
      const double r = std::min(1.0, std::abs(s / (norm[i] * norm[j])));
      out.a(i, j) = r;
      out.a(j, i) = r;
    }
  }
  return out;
}

/// Recording -> EEG graph: band-pass, PSD node features, thresholded |Pearson|
/// adjacency. Node i is montage channel i.
inline EegGraph build_graph(const Recording& rec, const Band& band, std::size_t n_bins,
                            double adjacency_threshold) {
  rec.validate();
  const Recording filtered = bandpass(rec, band);
  EegGraph g;
  g.x = psd_features(filtered, band, n_bins);
  g.a = pearson_adjacency(filtered).a;
  for (double& v : g.a.values)
    if (v < adjacency_threshold) v = 0.0;
  for (std::size_t i = 0; i < rec.channels(); ++i) g.node_ids.push_back(i);
  g.label = rec.label;
  g.subject_id = rec.subject_id;
  g.tier = DensityTier::HD;
  return g;
}

}  // namespace disgcmae
