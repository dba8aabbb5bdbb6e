#pragma once

// Synthetic embedding/latent world. Benign tokens are unit vectors with a
// small component along a hidden unsafe direction u; an unsafe prompt
// replaces k tokens v by normalize(v + β·u′) where u′ is u (plain pairs) or
// u rotated by at most a few degrees (adversarial analogs). Latents are
// z_t = √ᾱ_t·z₀ + √(1−ᾱ_t)·η with z₀ = label·s·U + background.
//
// Storage is pair records plus trajectories (z₀, η); a data item is the view
// (trajectory, t).

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "saferedir/config.hpp"
#include "saferedir/model.hpp"
#include "saferedir/numerics/rng.hpp"
#include "saferedir/redirection.hpp"

namespace saferedir {

/// ᾱ_t = cos²(π/2 · t/T), t = 0..T.
struct MockSchedule {
  std::vector<double> alpha_bar;

  MockSchedule() = default;
  explicit MockSchedule(int T) : alpha_bar(std::size_t(T) + 1) {
    for (int t = 0; t <= T; ++t) {
      const double c = std::cos(std::numbers::pi / 2 * double(t) / double(T));
      alpha_bar[std::size_t(t)] = c * c;
    }
  }
  int T() const { return int(alpha_bar.size()) - 1; }
};

struct PairRecord {
  int id = 0;
  int base = 0;
  int variant = 0;  // 0 plain, 1 adversarial analog
  int L = 0;
  std::vector<int> planted;
  double angle_deg = 0;
  Array<float> emb_safe;    // L×D
  Array<float> emb_unsafe;  // L×D
  Array<float> m_star;      // L
  Array<float> u_dir;       // D, direction used for planting
};

struct Trajectory {
  int record = 0;
  int seed = 0;
  int label = 0;
  Array<float> z0;   // C×H×W
  Array<float> eta;  // C×H×W
};

struct World {
  WorldConfig cfg;
  MockSchedule schedule;
  Array<float> u;          // D
  Array<float> U;          // C×H×W, unit norm
  Array<float> vocab;      // V×D
  Array<float> prototype;  // D, mean benign token
};

struct ItemRef {
  std::uint32_t traj = 0;
  std::uint16_t t = 0;
  friend bool operator==(const ItemRef&, const ItemRef&) = default;
};

struct DataItem {
  Array<float> z_t;
  int t = 0;
  int label = 0;
  Array<float> m_star;
  Array<float> p_emb;
  Array<float> emb_safe;
  Array<float> emb_unsafe;
  int pair = 0;
};

struct Split {
  std::vector<int> train_bases, val_bases;
  std::vector<ItemRef> train, val;
};

struct Dataset {
  World world;
  std::vector<PairRecord> records;
  std::vector<Trajectory> trajs;

  std::size_t item_count() const { return trajs.size() * std::size_t(world.cfg.T); }
  std::size_t latent_size() const { return std::size_t(world.cfg.C * world.cfg.H * world.cfg.W); }

  /// z_t of a trajectory at step t.
  Array<float> latent(std::size_t traj, int t) const {
    const Trajectory& tr = trajs.at(traj);
    const double a = std::sqrt(world.schedule.alpha_bar.at(std::size_t(t)));
    const double b = std::sqrt(1.0 - world.schedule.alpha_bar[std::size_t(t)]);
    Array<float> z({std::size_t(world.cfg.C), std::size_t(world.cfg.H), std::size_t(world.cfg.W)});
    for (std::size_t i = 0; i < z.size(); ++i) z[i] = float(a * tr.z0[i] + b * tr.eta[i]);
    return z;
  }

  DataItem item(ItemRef ref) const {
    const Trajectory& tr = trajs.at(ref.traj);
    const PairRecord& r = records.at(std::size_t(tr.record));
    DataItem it;
    it.z_t = latent(ref.traj, ref.t);
    it.t = ref.t;
    it.label = tr.label;
    it.emb_safe = r.emb_safe;
    it.emb_unsafe = r.emb_unsafe;
    it.p_emb = tr.label ? r.emb_unsafe : r.emb_safe;
    it.m_star = tr.label ? r.m_star : Array<float>(r.m_star.shape());
    it.pair = r.base;
    return it;
  }

  /// Stacks items of equal prompt length into a batch.
  Batch<float> batch(const std::vector<ItemRef>& refs) const {
    if (refs.empty()) throw DomainError("empty batch");
    const std::size_t B = refs.size(), D = std::size_t(world.cfg.D);
    const std::size_t L = std::size_t(records[std::size_t(trajs.at(refs[0].traj).record)].L), Z = latent_size();
    Batch<float> b;
    b.input.z = Array<float>({B, std::size_t(world.cfg.C), std::size_t(world.cfg.H), std::size_t(world.cfg.W)});
    b.input.tokens = Array<float>({B, L, D});
    b.emb_safe = Array<float>({B, L, D});
    b.emb_unsafe = Array<float>({B, L, D});
    b.m_star = Array<float>({B, L});
    for (std::size_t i = 0; i < B; ++i) {
      const Trajectory& tr = trajs.at(refs[i].traj);
      const PairRecord& r = records[std::size_t(tr.record)];
      if (std::size_t(r.L) != L) throw DimensionError("batch mixes prompt lengths");
      Array<float> z = latent(refs[i].traj, refs[i].t);
      std::copy_n(z.data(), Z, b.input.z.data() + i * Z);
      b.input.t.push_back(refs[i].t);
      b.labels.push_back(tr.label);
      const Array<float>& p = tr.label ? r.emb_unsafe : r.emb_safe;
      std::copy_n(p.data(), L * D, b.input.tokens.data() + i * L * D);
      std::copy_n(r.emb_safe.data(), L * D, b.emb_safe.data() + i * L * D);
      std::copy_n(r.emb_unsafe.data(), L * D, b.emb_unsafe.data() + i * L * D);
      if (tr.label) std::copy_n(r.m_star.data(), L, b.m_star.data() + i * L);
    }
    return b;
  }

  int prompt_length(ItemRef ref) const { return records[std::size_t(trajs.at(ref.traj).record)].L; }
};

/// World ground truth: unsafe iff some token has cosine to u above the
/// configured threshold.
inline bool world_unsafe(const World& w, const Array<float>& tokens) {
  const std::size_t D = std::size_t(w.cfg.D), L = tokens.size() / D;
  for (std::size_t l = 0; l < L; ++l) {
    std::span<const float> tok(tokens.data() + l * D, D);
    if (cosine<float>(tok, w.u.span()) > float(w.cfg.unsafe_threshold)) return true;
  }
  return false;
}

namespace detail {

inline std::vector<double> unit_normal(Rng& rng, std::size_t n) {
  std::vector<double> v(n);
  double s = 0;
  for (double& x : v) {
    x = rng.normal();
    s += x * x;
  }
  s = std::sqrt(s);
  for (double& x : v) x /= s;
  return v;
}

/// Unit vector orthogonal to the unit vector u.
inline std::vector<double> orthogonal_unit(Rng& rng, const std::vector<double>& u) {
  std::vector<double> w = unit_normal(rng, u.size());
  double d = 0;
  for (std::size_t i = 0; i < u.size(); ++i) d += w[i] * u[i];
  double s = 0;
  for (std::size_t i = 0; i < u.size(); ++i) {
    w[i] -= d * u[i];
    s += w[i] * w[i];
  }
  s = std::sqrt(s);
  for (double& x : w) x /= s;
  return w;
}

/// 1 − cos(v, normalize(v + β·d)) for unit v, d with c = v·d.
inline double plant_gap(double beta, double c) {
  return 1.0 - (1.0 + beta * c) / std::sqrt(1.0 + 2.0 * beta * c + beta * beta);
}

/// Smallest β clearing τ at alignment c (bisection; the gap is increasing in β
/// for c > -1 up to its supremum).
inline double min_beta(double tau, double c) {
  double lo = 0, hi = 1;
  while (plant_gap(hi, c) <= tau && hi < 1e6) hi *= 2;
  for (int i = 0; i < 200; ++i) {
    const double mid = 0.5 * (lo + hi);
    (plant_gap(mid, c) > tau ? hi : lo) = mid;
  }
  return hi;
}

template <class V>
Array<float> to_f32(const V& v, Shape s) {
  Array<float> a(std::move(s));
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = float(v[i]);
  return a;
}

}  // namespace detail

/// Builds the full synthetic dataset. Aborts with a DomainError naming the
/// required β if a planted token does not clear τ.
inline Dataset generate_world(const WorldConfig& cfg, std::uint64_t seed) {
  RunConfig probe;
  probe.world = cfg;
  validate(probe);
  Dataset ds;
  World& w = ds.world;
  w.cfg = cfg;
  w.cfg.seed = seed;
  w.schedule = MockSchedule(cfg.T);
  const std::size_t D = std::size_t(cfg.D), Z = std::size_t(cfg.C * cfg.H * cfg.W), V = std::size_t(cfg.vocab);

  Rng rng(Rng::derive(seed, 0));
  const std::vector<double> u = detail::unit_normal(rng, D);
  w.u = detail::to_f32(u, {D});
  w.U = detail::to_f32(detail::unit_normal(rng, Z), {std::size_t(cfg.C), std::size_t(cfg.H), std::size_t(cfg.W)});
  std::vector<std::vector<double>> vocab(V);
  std::vector<double> proto(D, 0.0);
  for (auto& v : vocab) {
    const std::vector<double> perp = detail::orthogonal_unit(rng, u);
    const double c = std::clamp(rng.normal() * cfg.ambient_sd, -cfg.ambient_clip, cfg.ambient_clip);
    v.resize(D);
    for (std::size_t d = 0; d < D; ++d) {
      v[d] = std::sqrt(1 - c * c) * perp[d] + c * u[d];
      proto[d] += v[d] / double(V);
    }
  }
  w.vocab = Array<float>({V, D});
  for (std::size_t i = 0; i < V; ++i)
    for (std::size_t d = 0; d < D; ++d) w.vocab[i * D + d] = float(vocab[i][d]);
  w.prototype = detail::to_f32(proto, {D});

  const LengthRange* ranges[] = {&cfg.short_len, &cfg.medium_len, &cfg.long_len};
  const int variants = cfg.adversarial ? 2 : 1;
  for (int b = 0; b < cfg.pairs; ++b) {
    Rng pr(Rng::derive(seed, 1000 + std::uint64_t(b)));
    const LengthRange& lr = *ranges[pr.below(3)];
    const int L = int(pr.range(lr.lo, lr.hi));
    std::vector<std::size_t> words(static_cast<std::size_t>(L));
    for (auto& x : words) x = pr.below(V);
    const int k = int(pr.range(cfg.k_min, std::min(cfg.k_max, L)));
    std::vector<int> pos(static_cast<std::size_t>(L));
    for (int i = 0; i < L; ++i) pos[std::size_t(i)] = i;
    pr.shuffle(pos);
    pos.resize(std::size_t(k));
    std::sort(pos.begin(), pos.end());

    for (int var = 0; var < variants; ++var) {
      std::vector<double> dir = u;
      double angle = 0;
      if (var == 1) {
        angle = pr.uniform(0, cfg.adversarial_max_deg);
        const std::vector<double> r = detail::orthogonal_unit(pr, u);
        const double th = angle * std::numbers::pi / 180;
        for (std::size_t d = 0; d < D; ++d) dir[d] = std::cos(th) * u[d] + std::sin(th) * r[d];
      }
      PairRecord rec;
      rec.id = int(ds.records.size());
      rec.base = b;
      rec.variant = var;
      rec.L = L;
      rec.planted = pos;
      rec.angle_deg = angle;
      rec.u_dir = detail::to_f32(dir, {D});
      std::vector<double> safe(std::size_t(L) * D), unsafe;
      for (int l = 0; l < L; ++l)
        std::copy(vocab[words[std::size_t(l)]].begin(), vocab[words[std::size_t(l)]].end(), safe.begin() + l * long(D));
      unsafe = safe;
      for (int l : pos) {
        double* t = unsafe.data() + std::size_t(l) * D;
        double c = 0, n = 0;
        for (std::size_t d = 0; d < D; ++d) c += t[d] * dir[d];
        for (std::size_t d = 0; d < D; ++d) {
          t[d] += cfg.beta * dir[d];
          n += t[d] * t[d];
        }
        n = std::sqrt(n);
        for (std::size_t d = 0; d < D; ++d) t[d] /= n;
        const double gap = detail::plant_gap(cfg.beta, c);
        if (!(gap > cfg.tau)) {
          std::ostringstream os;
          os << "beta=" << cfg.beta << " too small: planted token (pair " << b << ", position " << l
             << ") has 1-cos=" << gap << " <= tau=" << cfg.tau << "; this token needs beta > "
             << detail::min_beta(cfg.tau, c);
          throw DomainError(os.str());
        }
      }
      rec.emb_safe = detail::to_f32(safe, {std::size_t(L), D});
      rec.emb_unsafe = detail::to_f32(unsafe, {std::size_t(L), D});
      rec.m_star = build_pseudo_mask(rec.emb_safe, rec.emb_unsafe, cfg.tau);
      for (int l = 0; l < L; ++l) {
        const bool planted = std::find(pos.begin(), pos.end(), l) != pos.end();
        if ((rec.m_star[std::size_t(l)] == 1.0f) != planted)
          throw DomainError("pseudo mask disagrees with planted positions at pair " + std::to_string(b) +
                            ", position " + std::to_string(l) + " (beta=" + std::to_string(cfg.beta) + ")");
      }
      ds.records.push_back(std::move(rec));
    }
  }

  // One background/noise draw per (record, seed), shared by the safe and
  // unsafe prompt of that seed.
  for (const PairRecord& rec : ds.records)
    for (int s = 0; s < cfg.seeds_per_prompt; ++s) {
      Rng tr(Rng::derive(seed, 1'000'000 + std::uint64_t(rec.id) * 64 + std::uint64_t(s)));
      Array<float> bg(w.U.shape()), eta(w.U.shape());
      for (std::size_t i = 0; i < Z; ++i) bg[i] = float(tr.normal() * cfg.background);
      for (std::size_t i = 0; i < Z; ++i) eta[i] = float(tr.normal());
      for (int label = 0; label < 2; ++label) {
        Trajectory t;
        t.record = rec.id;
        t.seed = s;
        t.label = label;
        t.z0 = Array<float>(w.U.shape());
        for (std::size_t i = 0; i < Z; ++i) t.z0[i] = float(label * cfg.signal * double(w.U[i]) + double(bg[i]));
        t.eta = eta;
        ds.trajs.push_back(std::move(t));
      }
    }
  return ds;
}

/// Pair-disjoint split: base pairs are shuffled with a seed derived from the
/// world seed and the first `ratio` share goes to training.
/// Planting margins of a generated dataset: the smallest 1 − cos between a
/// planted token and its safe original, and the largest β any planted token
/// would need to clear τ.
struct BetaReport {
  double beta = 0;
  double tau = 0;
  double min_gap = 0;
  double required_beta = 0;
  std::size_t planted_tokens = 0;
};

inline BetaReport beta_report(const Dataset& ds) {
  BetaReport r;
  r.beta = ds.world.cfg.beta;
  r.tau = ds.world.cfg.tau;
  r.min_gap = 2;
  const std::size_t D = std::size_t(ds.world.cfg.D);
  for (const PairRecord& rec : ds.records)
    for (int l : rec.planted) {
      std::span<const float> s(rec.emb_safe.data() + std::size_t(l) * D, D);
      std::span<const float> u(rec.emb_unsafe.data() + std::size_t(l) * D, D);
      r.min_gap = std::min(r.min_gap, 1.0 - double(cosine<float>(s, u)));
      r.required_beta = std::max(r.required_beta, detail::min_beta(r.tau, double(cosine<float>(s, rec.u_dir.span()))));
      ++r.planted_tokens;
    }
  if (r.planted_tokens == 0) r.min_gap = 0;
  return r;
}

inline Split split(const Dataset& ds, double ratio) {
  if (ratio <= 0 || ratio >= 1) throw DomainError("split ratio must be in (0, 1)");
  const int P = ds.world.cfg.pairs;
  std::vector<int> bases(static_cast<std::size_t>(P));
  for (int i = 0; i < P; ++i) bases[std::size_t(i)] = i;
  Rng rng(Rng::derive(ds.world.cfg.seed, 77));
  rng.shuffle(bases);
  const std::size_t n_train = std::size_t(std::llround(ratio * P));
  Split s;
  s.train_bases.assign(bases.begin(), bases.begin() + long(n_train));
  s.val_bases.assign(bases.begin() + long(n_train), bases.end());
  std::vector<char> is_train(std::size_t(P), 0);
  for (int b : s.train_bases) is_train[std::size_t(b)] = 1;
  for (std::size_t tr = 0; tr < ds.trajs.size(); ++tr) {
    const int base = ds.records[std::size_t(ds.trajs[tr].record)].base;
    auto& dst = is_train[std::size_t(base)] ? s.train : s.val;
    for (int t = 1; t <= ds.world.cfg.T; ++t) dst.push_back({std::uint32_t(tr), std::uint16_t(t)});
  }
  return s;
}

// ---- serialization ---------------------------------------------------------

inline constexpr char kDatasetMagic[4] = {'S', 'R', 'D', '1'};
inline constexpr int kDatasetVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xFF));
}

inline std::uint32_t get_u32(const std::string& in, std::size_t off) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(std::uint8_t(in[off + std::size_t(i)])) << (8 * i);
  return v;
}

inline void put_f32(std::string& out, const Array<float>& a) {
  for (float f : a.vec()) put_u32(out, std::bit_cast<std::uint32_t>(f));
}

/// Sequential reader over a fully loaded buffer.
class Cursor {
 public:
  Cursor(const std::string& buf, std::size_t off, const std::string& what) : buf_(buf), off_(off), what_(what) {}
  Array<float> f32(Shape s) {
    const std::size_t n = shape_size(s);
    if (buf_.size() - off_ < 4 * n) throw FormatError(what_ + " is truncated");
    Array<float> a(std::move(s));
    for (std::size_t i = 0; i < n; ++i, off_ += 4) a[i] = std::bit_cast<float>(get_u32(buf_, off_));
    return a;
  }
  void expect_end() const {
    if (off_ != buf_.size()) throw FormatError(what_ + " has trailing bytes");
  }

 private:
  const std::string& buf_;
  std::size_t off_;
  std::string what_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes to a sibling temp file, then renames over the target.
inline void write_atomic(const std::string& path, const std::string& bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot write '" + tmp + "'");
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out) throw FormatError("write failed for '" + tmp + "'");
  }
  std::filesystem::rename(tmp, path);
}

/// Splits magic + u32 length + JSON header; returns the offset of the payload.
inline std::size_t read_header(const std::string& buf, const char (&magic)[4], json& header, const std::string& what) {
  if (buf.size() < 8 || std::memcmp(buf.data(), magic, 4) != 0)
    throw FormatError(what + ": bad magic (expected " + std::string(magic, 4) + ")");
  const std::uint32_t n = get_u32(buf, 4);
  if (buf.size() - 8 < n) throw FormatError(what + " is truncated (header)");
  try {
    header = json::parse(buf.substr(8, n));
  } catch (const json::parse_error& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  }
  return 8 + n;
}

inline std::uint64_t fnv1a(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace detail

inline std::string serialize(const Dataset& ds) {
  const auto& c = ds.world.cfg;
  json recs = json::array();
  for (const auto& r : ds.records)
    recs.push_back({{"id", r.id}, {"base", r.base}, {"variant", r.variant}, {"L", r.L}, {"planted", r.planted},
                    {"angle_deg", r.angle_deg}});
  json header = {{"format_version", kDatasetVersion},
                 {"dtype", "f32le"},
                 {"world", to_json(c)},
                 {"counts",
                  {{"records", ds.records.size()}, {"trajectories", ds.trajs.size()}, {"items", ds.item_count()}}},
                 {"records", recs}};
  const std::string h = header.dump();
  std::string out(kDatasetMagic, 4);
  detail::put_u32(out, std::uint32_t(h.size()));
  out += h;
  detail::put_f32(out, ds.world.u);
  detail::put_f32(out, ds.world.U);
  detail::put_f32(out, ds.world.vocab);
  detail::put_f32(out, ds.world.prototype);
  for (const auto& r : ds.records) {
    detail::put_f32(out, r.emb_safe);
    detail::put_f32(out, r.emb_unsafe);
    detail::put_f32(out, r.m_star);
    detail::put_f32(out, r.u_dir);
  }
  for (const auto& t : ds.trajs) {
    detail::put_f32(out, t.z0);
    detail::put_f32(out, t.eta);
  }
  return out;
}

/// Parses a full dataset image. With expected_D > 0 a dimension mismatch is a
/// FormatError naming both values. Nothing is returned unless the whole
/// image is consistent.
inline Dataset deserialize(const std::string& buf, int expected_D = 0, const std::string& what = "dataset") {
  json header;
  const std::size_t off = detail::read_header(buf, kDatasetMagic, header, what);
  Dataset ds;
  try {
    if (header.at("format_version").get<int>() != kDatasetVersion)
      throw FormatError(what + ": unsupported version " + header.at("format_version").dump());
    if (header.at("dtype").get<std::string>() != "f32le") throw FormatError(what + ": unsupported dtype");
    parse(header.at("world"), ds.world.cfg);
  } catch (const json::exception& e) {
    throw FormatError(what + ": malformed header: " + e.what());
  } catch (const ConfigError& e) {
    throw FormatError(what + ": " + e.what());
  }
  const WorldConfig& c = ds.world.cfg;
  if (expected_D > 0 && c.D != expected_D)
    throw FormatError(what + " has embedding dimension D=" + std::to_string(c.D) + " but D=" +
                      std::to_string(expected_D) + " was expected");
  ds.world.schedule = MockSchedule(c.T);
  const std::size_t D = std::size_t(c.D);
  const Shape zs{std::size_t(c.C), std::size_t(c.H), std::size_t(c.W)};
  detail::Cursor cur(buf, off, what);
  ds.world.u = cur.f32({D});
  ds.world.U = cur.f32(zs);
  ds.world.vocab = cur.f32({std::size_t(c.vocab), D});
  ds.world.prototype = cur.f32({D});
  try {
    for (const auto& jr : header.at("records")) {
      PairRecord r;
      r.id = jr.at("id");
      r.base = jr.at("base");
      r.variant = jr.at("variant");
      r.L = jr.at("L");
      r.planted = jr.at("planted").get<std::vector<int>>();
      r.angle_deg = jr.at("angle_deg");
      if (r.L < 1) throw FormatError(what + ": record with L < 1");
      r.emb_safe = cur.f32({std::size_t(r.L), D});
      r.emb_unsafe = cur.f32({std::size_t(r.L), D});
      r.m_star = cur.f32({std::size_t(r.L)});
      r.u_dir = cur.f32({D});
      ds.records.push_back(std::move(r));
    }
    const std::size_t n_traj = header.at("counts").at("trajectories");
    if (n_traj != ds.records.size() * std::size_t(c.seeds_per_prompt) * 2)
      throw FormatError(what + ": trajectory count inconsistent with records");
    for (std::size_t i = 0; i < n_traj; ++i) {
      Trajectory t;
      t.record = int(i / (2 * std::size_t(c.seeds_per_prompt)));
      t.seed = int((i / 2) % std::size_t(c.seeds_per_prompt));
      t.label = int(i % 2);
      t.z0 = cur.f32(zs);
      t.eta = cur.f32(zs);
      ds.trajs.push_back(std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(what + ": malformed record header: " + e.what());
  }
  cur.expect_end();
  return ds;
}

inline void save_dataset(const Dataset& ds, const std::string& path) { detail::write_atomic(path, serialize(ds)); }

inline Dataset load_dataset(const std::string& path, int expected_D = 0) {
  return deserialize(detail::read_file(path), expected_D, "dataset '" + path + "'");
}

inline std::uint64_t dataset_hash(const Dataset& ds) { return detail::fnv1a(serialize(ds)); }

// ---- latent-only linear probe ----------------------------------------------

struct ProbeResult {
  std::vector<double> accuracy;  // index t = 1..T (index 0 unused)
  double noisy = 0;              // pooled over the noisiest 10% of steps
  double clean = 0;              // pooled over the final 10% of steps
  double spearman = 0;           // accuracy vs denoising progress
};

/// Spearman rank correlation with average ranks for ties.
inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<std::size_t> idx(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) idx[i] = i;
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < idx.size();) {
      std::size_t j = i;
      while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = 0.5 * double(i + j) + 1;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = double(x.size());
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += rx[i] / n;
    my += ry[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy) : 0.0;
}

/// Per-step ridge-regression probe on flattened z_t (train split) scored on
/// the validation split.
inline ProbeResult latent_probe(const Dataset& ds, const Split& sp, double ridge = 1.0) {
  const int T = ds.world.cfg.T;
  const std::size_t Z = ds.latent_size();
  auto trajs_of = [&](const std::vector<ItemRef>& items) {
    std::vector<std::uint32_t> out;
    for (const auto& r : items)
      if (r.t == 1) out.push_back(r.traj);
    return out;
  };
  const auto tr = trajs_of(sp.train), va = trajs_of(sp.val);
  ProbeResult res;
  res.accuracy.assign(std::size_t(T) + 1, 0.0);
  const int band = std::max(1, int(std::ceil(0.1 * T)));
  std::size_t noisy_hit = 0, noisy_n = 0, clean_hit = 0, clean_n = 0;
  for (int t = 1; t <= T; ++t) {
    Eigen::MatrixXd X(long(tr.size()), long(Z) + 1);
    Eigen::VectorXd y(long(tr.size()));
    for (std::size_t i = 0; i < tr.size(); ++i) {
      Array<float> z = ds.latent(tr[i], t);
      for (std::size_t j = 0; j < Z; ++j) X(long(i), long(j)) = z[j];
      X(long(i), long(Z)) = 1.0;
      y(long(i)) = ds.trajs[tr[i]].label ? 1.0 : -1.0;
    }
    Eigen::MatrixXd A = X.transpose() * X;
    A.diagonal().array() += ridge;
    const Eigen::VectorXd wv = A.ldlt().solve(X.transpose() * y);
    std::size_t hit = 0;
    for (std::uint32_t id : va) {
      Array<float> z = ds.latent(id, t);
      double s = wv(long(Z));
      for (std::size_t j = 0; j < Z; ++j) s += wv(long(j)) * z[j];
      hit += ((s > 0) == (ds.trajs[id].label == 1));
    }
    res.accuracy[std::size_t(t)] = double(hit) / double(va.size());
    if (t > T - band) {
      noisy_hit += hit;
      noisy_n += va.size();
    }
    if (t <= band) {
      clean_hit += hit;
      clean_n += va.size();
    }
  }
  res.noisy = double(noisy_hit) / double(noisy_n);
  res.clean = double(clean_hit) / double(clean_n);
  std::vector<double> progress, acc;
  for (int t = 1; t <= T; ++t) {
    progress.push_back(double(T - t));
    acc.push_back(res.accuracy[std::size_t(t)]);
  }
  res.spearman = spearman(progress, acc);
  return res;
}

}  // namespace saferedir
