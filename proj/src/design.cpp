#include "txd/design.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include "txd/error.hpp"
#include "txd/rng.hpp"

namespace txd {

std::string_view shape_letter(Shape shape) noexcept {
  switch (shape) {
    case Shape::CompletelyRandomised: return "a";
    case Shape::RandomisedBlock: return "b";
    case Shape::Multicentre: return "c";
  }
  return "?";
}

Shape parse_shape(std::string_view text) {
  if (text == "a") return Shape::CompletelyRandomised;
  if (text == "b") return Shape::RandomisedBlock;
  if (text == "c") return Shape::Multicentre;
  throw ConfigError("unknown design '" + std::string(text) + "' (expected a, b or c)");
}

void DesignSpec::validate() const {
  if (nI < 2) throw ConfigError("need at least two interventions (nI=" + std::to_string(nI) + ")");
  if (nT < 1 || nB < 1 || nC < 1 || nR < 1) throw ConfigError("counts nT, nB, nC and nR must be positive");
  if (shape == Shape::CompletelyRandomised && (nB != 1 || nC != 1)) {
    throw ConfigError("design a has no batches or centres (nB and nC must be 1)");
  }
  if (shape == Shape::RandomisedBlock && nC != 1) throw ConfigError("design b has no centres (nC must be 1)");
  const double n = static_cast<double>(nI) * nT * nB * nC * nR;
  if (n > static_cast<double>(std::numeric_limits<std::int32_t>::max())) {
    throw ConfigError("design too large: N would overflow");
  }
}

std::size_t DesignSpec::n_units() const {
  return static_cast<std::size_t>(nI) * nT * nB * nC * nR;
}

DesignSpec DesignSpec::example_a() { return {Shape::CompletelyRandomised, 2, 16, 1, 1, 10, 0}; }
DesignSpec DesignSpec::example_b() { return {Shape::RandomisedBlock, 2, 16, 5, 1, 2, 0}; }
DesignSpec DesignSpec::example_c() { return {Shape::Multicentre, 2, 8, 5, 6, 2, 0}; }

std::vector<std::int32_t> AllocationTable::column(std::string_view name) const {
  std::vector<std::int32_t> out(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    if (name == "I" || name == "intervention") {
      out[i] = r.intervention;
    } else if (name == "T" || name == "therapist") {
      out[i] = r.therapist;
    } else if (name == "B" || name == "batch") {
      out[i] = r.batch;
    } else if (name == "C" || name == "centre") {
      out[i] = r.centre;
    } else if (name == "E" || name == "patient") {
      out[i] = r.patient;
    } else {
      throw BindingError("design has no column '" + std::string(name) + "'");
    }
  }
  return out;
}

Factor AllocationTable::factor(std::string_view name) const {
  std::string key(name);
  if (name == "intervention") key = "I";
  if (name == "therapist") key = "T";
  if (name == "batch") key = "B";
  if (name == "centre") key = "C";
  const auto lv = column(name);
  return Factor(key, lv, key == "I" ? Role::Fixed : Role::Random);
}

std::string AllocationTable::to_csv() const {
  std::ostringstream os;
  os << "patient,centre,batch,therapist,intervention\n";
  for (const auto& r : rows) {
    os << r.patient + 1 << ',' << r.centre + 1 << ',' << r.batch + 1 << ',' << r.therapist + 1 << ','
       << r.intervention + 1 << '\n';
  }
  return os.str();
}

void MatchingInputs::validate(const DesignSpec& spec) const {
  const std::size_t n = spec.n_units();
  const auto nt = static_cast<std::size_t>(spec.n_therapists());
  const auto ni = static_cast<std::size_t>(spec.nI);
  if (use_x2 && (x2.size() != n || m2.size() != nt)) {
    throw ConfigError("matching inputs: x2 needs one value per patient and m2 one per therapist");
  }
  if (use_x3) {
    if (x3.size() != n || m3.size() != nt) {
      throw ConfigError("matching inputs: x3 needs one row per patient and m3 one per therapist");
    }
    for (const auto& row : x3) {
      if (row.size() != ni) throw ConfigError("matching inputs: x3 rows need one value per intervention");
    }
    for (const auto& row : m3) {
      if (row.size() != ni) throw ConfigError("matching inputs: m3 rows need one value per intervention");
    }
  }
}

AllocationTable systematic_design(const DesignSpec& spec) {
  spec.validate();
  AllocationTable t;
  t.spec = spec;
  t.rows.reserve(spec.n_units());
  std::int32_t patient = 0;
  for (int c = 0; c < spec.nC; ++c) {
    for (int b = 0; b < spec.nB; ++b) {
      for (int i = 0; i < spec.nI; ++i) {
        for (int j = 0; j < spec.nT; ++j) {
          for (int r = 0; r < spec.nR; ++r) {
            t.rows.push_back({patient++, c, b, c * spec.nT + j, i});
          }
        }
      }
    }
  }
  return t;
}

AllocationTable randomise(const DesignSpec& spec) {
  AllocationTable sys = systematic_design(spec);
  AllocationTable out = sys;
  const std::size_t bs = spec.block_size();
  std::vector<std::size_t> perm(bs);
  for (int c = 0; c < spec.nC; ++c) {
    for (int b = 0; b < spec.nB; ++b) {
      const std::size_t start = (static_cast<std::size_t>(c) * spec.nB + b) * bs;
      for (std::size_t k = 0; k < bs; ++k) perm[k] = k;
      Rng rng = make_rng(spec.seed, {stream::kPermute, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(b)});
      shuffle(perm, rng);
      for (std::size_t k = 0; k < bs; ++k) {
        const auto& src = sys.rows[start + perm[k]];
        auto& dst = out.rows[start + k];
        dst.therapist = src.therapist;
        dst.intervention = src.intervention;
      }
    }
  }
  out.method = 0;
  return out;
}

namespace {

struct BlockView {
  int centre;
  int batch;
  std::size_t start;
  std::size_t size;
};

// Greedy covariate matching: patients in recruitment order take the
// nearest therapist of their centre that still has capacity.
void greedy_therapists(AllocationTable& t, const BlockView& blk, const MatchingInputs& in, bool see_x2,
                       bool see_x3) {
  const auto& spec = t.spec;
  const int cap = spec.nI * spec.nR;
  std::vector<int> load(static_cast<std::size_t>(spec.nT), 0);
  for (std::size_t k = 0; k < blk.size; ++k) {
    auto& row = t.rows[blk.start + k];
    const auto p = static_cast<std::size_t>(row.patient);
    int best = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int j = 0; j < spec.nT; ++j) {
      if (load[static_cast<std::size_t>(j)] >= cap) continue;
      const auto g = static_cast<std::size_t>(blk.centre * spec.nT + j);
      double d = 0.0;
      if (see_x2) d += std::abs(in.x2[p] - in.m2[g]);
      if (see_x3) {
        const auto i = static_cast<std::size_t>(row.intervention);
        d += std::abs(in.x3[p][i] - in.m3[g][i]);
      }
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    ++load[static_cast<std::size_t>(best)];
    row.therapist = blk.centre * spec.nT + best;
  }
}

std::vector<std::int32_t> shuffled_interventions(const DesignSpec& spec, std::size_t per_level, Rng& rng) {
  std::vector<std::int32_t> v;
  v.reserve(per_level * static_cast<std::size_t>(spec.nI));
  for (int i = 0; i < spec.nI; ++i) v.insert(v.end(), per_level, i);
  shuffle(v, rng);
  return v;
}

}  // namespace

AllocationTable assign_by_method(const DesignSpec& spec, Method method, const MatchingInputs* inputs) {
  if (method < 1 || method > 5) throw ConfigError("method must be between 1 and 5");
  if (method == 4) {
    AllocationTable t = randomise(spec);
    t.method = 4;
    return t;
  }
  if (method <= 3) {
    if (inputs == nullptr) {
      throw ConfigError("method " + std::to_string(method) + " matches patients to therapists and needs covariates");
    }
    inputs->validate(spec);
  }

  AllocationTable t = systematic_design(spec);
  t.method = method;
  const std::size_t bs = spec.block_size();
  const auto per_arm = static_cast<std::size_t>(spec.nT) * spec.nR;

  for (int c = 0; c < spec.nC; ++c) {
    for (int b = 0; b < spec.nB; ++b) {
      const BlockView blk{c, b, (static_cast<std::size_t>(c) * spec.nB + b) * bs, bs};
      const auto uc = static_cast<std::uint64_t>(c);
      const auto ub = static_cast<std::uint64_t>(b);
      Rng irng = make_rng(spec.seed, {stream::kIntervention, uc, ub});
      Rng trng = make_rng(spec.seed, {stream::kTherapist, uc, ub});
      switch (method) {
        case 1: {
          const auto iv = shuffled_interventions(spec, per_arm, irng);
          for (std::size_t k = 0; k < bs; ++k) t.rows[blk.start + k].intervention = iv[k];
          greedy_therapists(t, blk, *inputs, inputs->use_x2, inputs->use_x3);
          break;
        }
        case 2: {
          greedy_therapists(t, blk, *inputs, true, false);
          const auto iv = shuffled_interventions(spec, per_arm, irng);
          for (std::size_t k = 0; k < bs; ++k) t.rows[blk.start + k].intervention = iv[k];
          break;
        }
        case 3: {
          greedy_therapists(t, blk, *inputs, true, false);
          for (int j = 0; j < spec.nT; ++j) {
            const std::int32_t g = c * spec.nT + j;
            auto iv = shuffled_interventions(spec, static_cast<std::size_t>(spec.nR), irng);
            std::size_t next = 0;
            for (std::size_t k = 0; k < bs; ++k) {
              auto& row = t.rows[blk.start + k];
              if (row.therapist == g) row.intervention = iv[next++];
            }
          }
          break;
        }
        case 5: {
          const auto iv = shuffled_interventions(spec, per_arm, irng);
          for (std::size_t k = 0; k < bs; ++k) t.rows[blk.start + k].intervention = iv[k];
          for (int i = 0; i < spec.nI; ++i) {
            std::vector<std::int32_t> th;
            th.reserve(per_arm);
            for (int j = 0; j < spec.nT; ++j) th.insert(th.end(), static_cast<std::size_t>(spec.nR), c * spec.nT + j);
            shuffle(th, trng);
            std::size_t next = 0;
            for (std::size_t k = 0; k < bs; ++k) {
              auto& row = t.rows[blk.start + k];
              if (row.intervention == i) row.therapist = th[next++];
            }
          }
          break;
        }
        default: break;
      }
    }
  }
  return t;
}

std::vector<std::int32_t> cell_counts(const AllocationTable& table, int centre, int batch) {
  const auto& spec = table.spec;
  std::vector<std::int32_t> counts(static_cast<std::size_t>(spec.nI) * spec.n_therapists(), 0);
  for (const auto& r : table.rows) {
    if (centre >= 0 && r.centre != centre) continue;
    if (batch >= 0 && r.batch != batch) continue;
    ++counts[static_cast<std::size_t>(r.intervention) * spec.n_therapists() + r.therapist];
  }
  return counts;
}

}  // namespace txd
