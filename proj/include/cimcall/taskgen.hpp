#pragma once

#include <algorithm>
#include <array>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "errors.hpp"
#include "rng.hpp"

namespace cimcall {

inline constexpr int kNumBases = 4;
inline constexpr int kBlank = 4;
inline constexpr int kNumClasses = 5;
inline constexpr char kBaseChars[] = {'A', 'C', 'G', 'T'};

inline int base_index(char c) {
  switch (c) {
    case 'A': return 0;
    case 'C': return 1;
    case 'G': return 2;
    case 'T': return 3;
    default: throw PreconditionError(std::string("invalid base '") + c + "'");
  }
}

struct SyntheticRead {
  std::string reference;
  std::vector<double> signal;
  std::vector<int> frame_labels;  // 0..3 bases, 4 blank
};

struct TaskConfig {
  int n_reads = 200;
  int read_length = 60;
  double noise_sigma = 0.05;
  int dwell_min = 1;
  int dwell_max = 3;
  int k = 3;
  // Share of each k-mer level drawn at random; the rest comes from the centre
  // base, which keeps the map learnable by a small network.
  double context_weight = 0.15;
  uint64_t table_seed = 1;

  void validate() const {
    require(n_reads >= 0, "task: n_reads must be >= 0");
    require(k >= 1 && k % 2 == 1 && k <= 7, "task: k must be odd and in [1,7]");
    require(read_length >= k, "task: read_length must be >= k");
    require(noise_sigma >= 0.0, "task: noise_sigma must be >= 0");
    require(dwell_min >= 1 && dwell_max >= dwell_min, "task: need 1 <= dwell_min <= dwell_max");
    require(context_weight >= 0.0 && context_weight <= 1.0, "task: context_weight must be in [0,1]");
  }
};

// Seeded map from the 4^k k-mers (centre base at index k/2) to levels in [-1,1].
struct KmerTable {
  int k = 3;
  std::vector<double> level;

  int index(const std::string& ref, int pos) const {
    const int n = static_cast<int>(ref.size()), half = k / 2;
    int idx = 0;
    for (int d = -half; d <= half; ++d) idx = idx * 4 + base_index(ref[std::clamp(pos + d, 0, n - 1)]);
    return idx;
  }
  double at(const std::string& ref, int pos) const { return level[index(ref, pos)]; }
};

inline KmerTable make_kmer_table(const TaskConfig& cfg) {
  RngStream rng(cfg.table_seed, {0x6B6D6572ull, 0});
  std::array<double, 4> centre = {-0.75, -0.25, 0.25, 0.75};
  for (int i = 3; i > 0; --i) std::swap(centre[i], centre[rng.uniform_int(0, i)]);
  KmerTable t;
  t.k = cfg.k;
  const int n = 1 << (2 * cfg.k);
  t.level.resize(n);
  const int shift = 2 * (cfg.k / 2);
  for (int idx = 0; idx < n; ++idx) {
    const int c = (idx >> shift) & 3;
    const double u = 2.0 * rng.uniform() - 1.0;
    t.level[idx] = std::clamp((1.0 - cfg.context_weight) * centre[c] + cfg.context_weight * u, -1.0, 1.0);
  }
  return t;
}

// References never repeat a base back to back, so a dwell-1 base followed by
// the same base cannot merge under label collapse.
inline std::string random_reference(int length, RngStream& rng) {
  std::string s;
  s.reserve(length);
  int prev = static_cast<int>(rng.uniform_int(0, 3));
  s.push_back(kBaseChars[prev]);
  while (static_cast<int>(s.size()) < length) {
    int b = static_cast<int>(rng.uniform_int(0, 2));
    if (b >= prev) ++b;
    s.push_back(kBaseChars[b]);
    prev = b;
  }
  return s;
}

inline SyntheticRead synthesize_read(const std::string& ref, const TaskConfig& cfg, const KmerTable& tab,
                                     RngStream& rng) {
  SyntheticRead r;
  r.reference = ref;
  for (int i = 0; i < static_cast<int>(ref.size()); ++i) {
    const double mean = tab.at(ref, i);
    const int dwell = static_cast<int>(rng.uniform_int(cfg.dwell_min, cfg.dwell_max));
    for (int f = 0; f < dwell; ++f) {
      r.signal.push_back(cfg.noise_sigma > 0.0 ? mean + rng.normal(0.0, cfg.noise_sigma) : mean);
      r.frame_labels.push_back(f == 0 ? base_index(ref[i]) : kBlank);
    }
  }
  return r;
}

inline std::vector<SyntheticRead> generate_dataset(const TaskConfig& cfg, RngStream& rng) {
  cfg.validate();
  const KmerTable tab = make_kmer_table(cfg);
  std::vector<SyntheticRead> out;
  out.reserve(cfg.n_reads);
  for (int n = 0; n < cfg.n_reads; ++n) {
    RngStream rr = rng.split(0x7265616Bull, static_cast<uint64_t>(n));
    out.push_back(synthesize_read(random_reference(cfg.read_length, rr), cfg, tab, rr));
  }
  return out;
}

// Drop blanks, merge adjacent identical symbols.
inline std::string collapse_labels(const std::vector<int>& labels) {
  std::string s;
  int prev = kBlank;
  for (int c : labels) {
    if (c != kBlank && c != prev) s.push_back(kBaseChars[c]);
    prev = c;
  }
  return s;
}

// rows = frames, 5 class scores each.
template <class Probs>
std::string greedy_decode(const Probs& p) {
  std::vector<int> arg(p.rows());
  for (int t = 0; t < p.rows(); ++t) {
    int best = 0;
    for (int c = 1; c < kNumClasses; ++c)
      if (p(t, c) > p(t, best)) best = c;
    arg[t] = best;
  }
  return collapse_labels(arg);
}

struct Alignment {
  std::string a_aligned;
  std::string b_aligned;
  int score = 0;
  int matches = 0;
  int alignment_length = 0;
};

// Global alignment, match +1, mismatch -1, gap -1. Among equal-score
// alignments the one with more matches wins, which makes matches and length
// independent of argument order; remaining ties prefer diagonal, then up
// (gap in b), then left (gap in a).
inline Alignment global_align(const std::string& a, const std::string& b) {
  if (a.empty() || b.empty()) throw PreconditionError("global_align: empty sequence");
  const int n = static_cast<int>(a.size()), m = static_cast<int>(b.size());
  const int W = m + 1;
  std::vector<int> S((n + 1) * W), M((n + 1) * W);
  std::vector<unsigned char> dir((n + 1) * W, 0);  // 0 diag, 1 up, 2 left
  for (int i = 0; i <= n; ++i) {
    S[i * W] = -i;
    dir[i * W] = 1;
  }
  for (int j = 0; j <= m; ++j) {
    S[j] = -j;
    dir[j] = 2;
  }
  auto better = [](int s1, int m1, int s2, int m2) { return s1 > s2 || (s1 == s2 && m1 > m2); };
  for (int i = 1; i <= n; ++i)
    for (int j = 1; j <= m; ++j) {
      const bool eq = a[i - 1] == b[j - 1];
      int bs = S[(i - 1) * W + j - 1] + (eq ? 1 : -1), bm = M[(i - 1) * W + j - 1] + (eq ? 1 : 0);
      unsigned char bd = 0;
      const int us = S[(i - 1) * W + j] - 1, um = M[(i - 1) * W + j];
      if (better(us, um, bs, bm)) bs = us, bm = um, bd = 1;
      const int ls = S[i * W + j - 1] - 1, lm = M[i * W + j - 1];
      if (better(ls, lm, bs, bm)) bs = ls, bm = lm, bd = 2;
      S[i * W + j] = bs;
      M[i * W + j] = bm;
      dir[i * W + j] = bd;
    }
  Alignment al;
  al.score = S[n * W + m];
  int i = n, j = m;
  while (i > 0 || j > 0) {
    const unsigned char d = dir[i * W + j];
    if (d == 0) {
      al.a_aligned.push_back(a[i - 1]);
      al.b_aligned.push_back(b[j - 1]);
      al.matches += a[i - 1] == b[j - 1] ? 1 : 0;
      --i, --j;
    } else if (d == 1) {
      al.a_aligned.push_back(a[i - 1]);
      al.b_aligned.push_back('-');
      --i;
    } else {
      al.a_aligned.push_back('-');
      al.b_aligned.push_back(b[j - 1]);
      --j;
    }
  }
  std::reverse(al.a_aligned.begin(), al.a_aligned.end());
  std::reverse(al.b_aligned.begin(), al.b_aligned.end());
  al.alignment_length = static_cast<int>(al.a_aligned.size());
  return al;
}

// Text format, three lines per read: reference, comma-separated signal
// (%.17g), frame labels as a string over ACGT with '-' for blank.
inline void write_dataset(std::ostream& o, const std::vector<SyntheticRead>& reads) {
  o.precision(17);
  for (const auto& r : reads) {
    o << r.reference << '\n';
    for (size_t i = 0; i < r.signal.size(); ++i) o << (i ? "," : "") << r.signal[i];
    o << '\n';
    for (int c : r.frame_labels) o << (c == kBlank ? '-' : kBaseChars[c]);
    o << '\n';
  }
}

inline std::vector<SyntheticRead> read_dataset(std::istream& in) {
  std::vector<SyntheticRead> out;
  std::string ref, sig, lab;
  while (std::getline(in, ref)) {
    if (ref.empty()) continue;
    if (!std::getline(in, sig) || !std::getline(in, lab)) throw ConfigError("dataset: truncated record");
    SyntheticRead r;
    r.reference = ref;
    std::stringstream ss(sig);
    std::string tok;
    while (std::getline(ss, tok, ',')) r.signal.push_back(std::stod(tok));
    for (char c : lab) r.frame_labels.push_back(c == '-' ? kBlank : base_index(c));
    if (r.signal.size() != r.frame_labels.size()) throw ConfigError("dataset: signal/label length mismatch");
    out.push_back(std::move(r));
  }
  return out;
}

inline void save_dataset(const std::string& path, const std::vector<SyntheticRead>& reads) {
  std::ofstream o(path);
  if (!o) throw ConfigError("save_dataset: cannot open " + path);
  write_dataset(o, reads);
}

inline std::vector<SyntheticRead> load_dataset(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("load_dataset: cannot open " + path);
  return read_dataset(in);
}

}  // namespace cimcall
