// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#include "opadpo/synth.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "opadpo/error.hpp"
#include "opadpo/format.hpp"
#include "opadpo/rng.hpp"

namespace opadpo {

const char* to_string(ImageLabel label) {
  switch (label) {
    case ImageLabel::correct: return "correct";
    case ImageLabel::language_comprehension_error: return "language_comprehension_error";
    case ImageLabel::image_recognition_error: return "image_recognition_error";
  }
  return "correct";
}

ImageLabel image_label_from_string(const std::string& s) {
  if (s == "correct") return ImageLabel::correct;
  if (s == "language_comprehension_error") return ImageLabel::language_comprehension_error;
  if (s == "image_recognition_error") return ImageLabel::image_recognition_error;
  fail(ErrorKind::parse, "unknown image label '" + s + "'");
}

int PreferenceRecord::changed_sentences() const {
  return static_cast<int>(std::count_if(annotations.begin(), annotations.end(),
                                        [](const SentenceAnnotation& a) { return a.s_hal != 4; }));
}

}  // namespace opadpo

namespace opadpo::synth {

void WorldConfig::validate() const {
  require(n_attributes >= 1, ErrorKind::config, "world.attributes must be >= 1");
  require(n_values >= 1, ErrorKind::config, "world.values must be >= 1");
  require(presence_prob >= 0.0 && presence_prob <= 1.0, ErrorKind::config,
          "world.presence_prob must lie in [0, 1]");
  require(noise_std >= 0.0, ErrorKind::config, "world.noise_std must be >= 0");
}

TokenLayout TokenLayout::make(const PolicySpec& spec, const WorldConfig& cfg) {
  cfg.validate();
  spec.validate();
  const int A = cfg.n_attributes, V = cfg.n_values;
  require(A + V + 3 <= spec.vocab_size, ErrorKind::config,
          "vocabulary overflow: " + std::to_string(A) + " attribute + " + std::to_string(V) +
              " value tokens + DESCRIBE + SEP + EOS exceed vocab_size " +
              std::to_string(spec.vocab_size));
  require(spec.image_dim == A * V, ErrorKind::config,
          "image_dim must equal attributes * values");
  require(3 * A + 1 <= spec.max_len, ErrorKind::config,
          "max_len too small for a full ground-truth response");
  require(spec.max_len % 3 != 0, ErrorKind::config,
          "max_len must not be a multiple of 3 (revisions of truncated generations must fit)");
  return TokenLayout{A, V, spec.vocab_size};
}

int WorldState::n_present() const {
  return static_cast<int>(std::count(present.begin(), present.end(), true));
}

WorldState gen_world(std::uint64_t seed, int n_attributes, int n_values, double presence_prob) {
  require(n_attributes >= 1 && n_values >= 1, ErrorKind::config, "empty world grammar");
  require(presence_prob >= 0.0 && presence_prob <= 1.0, ErrorKind::config,
          "presence_prob must lie in [0, 1]");
  Rng rng(seed);
  WorldState w;
  w.present.assign(n_attributes, false);
  w.value.assign(n_attributes, -1);
  for (int a = 0; a < n_attributes; ++a) w.present[a] = rng.bernoulli(presence_prob);
  // Value draws happen for every attribute so presence does not shift them.
  std::vector<int> draws(n_attributes);
  for (int a = 0; a < n_attributes; ++a) draws[a] = static_cast<int>(rng.index(n_values));
  if (w.n_present() == 0) w.present[rng.index(n_attributes)] = true;
  for (int a = 0; a < n_attributes; ++a)
    if (w.present[a]) w.value[a] = draws[a];
  return w;
}

ImageFeatures render_features(const WorldState& world, int n_values, double noise_std,
                              std::uint64_t seed) {
  const int A = world.n_attributes();
  ImageFeatures m;
  m.features.assign(static_cast<std::size_t>(A) * n_values, 0.0);
  for (int a = 0; a < A; ++a)
    if (world.present[a]) m.features[a * n_values + world.value[a]] = 1.0;
  if (noise_std > 0.0) {
    Rng rng(seed);
    for (auto& f : m.features) f += noise_std * rng.normal();
  }
  return m;
}

Response gt_response(const PolicySpec& spec, const TokenLayout& layout,
                     const WorldState& world) {
  Tokens t;
  for (int a = 0; a < world.n_attributes(); ++a) {
    if (!world.present[a]) continue;
    t.push_back(layout.attr(a));
    t.push_back(layout.value(world.value[a]));
    t.push_back(layout.sep());
  }
  t.push_back(layout.eos());
  return Response(spec, std::move(t));
}

WorldState world_from_gt(const TokenLayout& layout, const Response& y_gt) {
  WorldState w;
  w.present.assign(layout.n_attributes, false);
  w.value.assign(layout.n_attributes, -1);
  for (const auto& tr : parse_triples(layout, y_gt)) {
    require(tr.well_formed, ErrorKind::validation, "ground-truth response is malformed");
    require(!w.present[tr.attribute], ErrorKind::validation,
            "ground-truth response repeats an attribute");
    w.present[tr.attribute] = true;
    w.value[tr.attribute] = tr.value;
  }
  require(w.n_present() > 0, ErrorKind::validation, "ground-truth response asserts nothing");
  return w;
}

Triple parse_sentence(const TokenLayout& layout, std::span<const int> s) {
  Triple tr;
  if (s.size() == 3 && layout.is_attr(s[0]) && layout.is_value(s[1]) && s[2] == layout.sep()) {
    tr.well_formed = true;
    tr.attribute = s[0];
    tr.value = s[1] - layout.n_attributes;
  }
  return tr;
}

std::vector<Triple> parse_triples(const TokenLayout& layout, const Response& y) {
  std::vector<Triple> out;
  out.reserve(y.sentence_spans().size());
  const auto& tok = y.tokens();
  for (const auto& [b, e] : y.sentence_spans())
    out.push_back(parse_sentence(layout, std::span<const int>(tok.data() + b, e - b)));
  return out;
}

namespace {

int block_argmax(const ImageFeatures& m, int attribute, int n_values) {
  int best = 0;
  for (int v = 1; v < n_values; ++v)
    if (m.features[attribute * n_values + v] > m.features[attribute * n_values + best]) best = v;
  return best;
}

}  // namespace

Revision revise(const PolicySpec& spec, const TokenLayout& layout, const Response& y_gen,
                const WorldState& world, const ImageFeatures& image, const WorldConfig& cfg) {
  require(y_gen.sentence_count() > 0, ErrorKind::data, "cannot revise an empty generation");
  const auto triples = parse_triples(layout, y_gen);
  const int A = layout.n_attributes;

  // Attributes kept by rules (a)/(b); replacements avoid them.
  std::vector<bool> asserted(A, false);
  for (const auto& tr : triples)
    if (tr.well_formed && world.present[tr.attribute]) asserted[tr.attribute] = true;
  int lowest_present = -1;
  for (int a = 0; a < A && lowest_present < 0; ++a)
    if (world.present[a]) lowest_present = a;

  auto triple_of = [&](int a) {
    return Tokens{layout.attr(a), layout.value(world.value[a]), layout.sep()};
  };
  auto replacement = [&]() {
    for (int a = 0; a < A; ++a)
      if (world.present[a] && !asserted[a]) {
        asserted[a] = true;
        return a;
      }
    return lowest_present;
  };

  Revision rev;
  Tokens out;
  const auto& tok = y_gen.tokens();
  for (std::size_t s = 0; s < triples.size(); ++s) {
    const auto& tr = triples[s];
    const auto [b, e] = y_gen.sentence_spans()[s];
    SentenceAnnotation ann;
    if (tr.well_formed && world.present[tr.attribute]) {
      if (tr.value == world.value[tr.attribute]) {
        ann.s_hal = 4;
        ann.s_img = ImageLabel::correct;
        ann.revised_span.assign(tok.begin() + b, tok.begin() + e);
      } else {
        const bool adjacent = std::abs(tr.value - world.value[tr.attribute]) == 1;
        ann.s_hal = cfg.minor_adjacent && adjacent ? 3 : 2;
        ann.s_img = tr.value == block_argmax(image, tr.attribute, layout.n_values)
                        ? ImageLabel::image_recognition_error
                        : ImageLabel::language_comprehension_error;
        ann.revised_span = triple_of(tr.attribute);
      }
    } else {
      ann.s_hal = 1;
      ann.s_img = tr.well_formed ? ImageLabel::image_recognition_error
                                 : ImageLabel::language_comprehension_error;
      ann.revised_span = triple_of(replacement());
    }
    out.insert(out.end(), ann.revised_span.begin(), ann.revised_span.end());
    rev.annotations.push_back(std::move(ann));
  }
  out.push_back(layout.eos());
  rev.y_rev = Response(spec, std::move(out));
  return rev;
}

void validate_record(const PolicySpec& spec, const TokenLayout& layout,
                     const PreferenceRecord& rec) {
  const std::string id = "record " + std::to_string(rec.record_id) + ": ";
  require(spec.max_len >= rec.y_gen.size(), ErrorKind::validation, id + "y_Gen too long");
  if (!rec.revised()) return;
  const auto& y_rev = *rec.y_rev;
  require(y_rev.sentence_count() == rec.y_gen.sentence_count(), ErrorKind::validation,
          id + "y_Rev has " + std::to_string(y_rev.sentence_count()) + " sentences, y_Gen has " +
              std::to_string(rec.y_gen.sentence_count()));
  require(static_cast<int>(rec.annotations.size()) == rec.y_gen.sentence_count(),
          ErrorKind::validation, id + "annotation count does not match y_Gen sentences");
  require(y_rev.terminated(), ErrorKind::validation, id + "y_Rev must end with EOS");
  const auto& gen = rec.y_gen.tokens();
  const auto& revt = y_rev.tokens();
  for (std::size_t s = 0; s < rec.annotations.size(); ++s) {
    const auto& a = rec.annotations[s];
    require(a.s_hal >= 1 && a.s_hal <= 4, ErrorKind::validation,
            id + "s_hal outside 1..4");
    require((a.s_hal == 4) == (a.s_img == ImageLabel::correct), ErrorKind::validation,
            id + "s_hal = 4 must coincide with label 'correct'");
    const auto [gb, ge] = rec.y_gen.sentence_spans()[s];
    const auto [rb, re] = y_rev.sentence_spans()[s];
    const bool same = std::equal(gen.begin() + gb, gen.begin() + ge, revt.begin() + rb,
                                 revt.begin() + re);
    require(same == (a.s_hal == 4), ErrorKind::validation,
            id + "sentence " + std::to_string(s) +
                ": unchanged revision must coincide with s_hal = 4");
  }
  (void)layout;
}

std::uint64_t record_seed(std::uint64_t global_seed, std::int64_t record_id,
                          std::uint64_t stream) {
  return mix_seed({global_seed, static_cast<std::uint64_t>(record_id), stream});
}

namespace {
constexpr std::uint64_t kWorldStream = 1, kNoiseStream = 2, kSampleStream = 3;
constexpr int kMaxRedraws = 16;
}  // namespace

Scene make_scene(std::uint64_t global_seed, std::int64_t record_id, const WorldConfig& wc) {
  Scene sc;
  sc.world = gen_world(record_seed(global_seed, record_id, kWorldStream), wc.n_attributes,
                       wc.n_values, wc.presence_prob);
  sc.image = render_features(sc.world, wc.n_values, wc.noise_std,
                             record_seed(global_seed, record_id, kNoiseStream));
  // Stored features are exactly what the dataset file will hold.
  for (auto& f : sc.image.features) f = canonical_real(f);
  return sc;
}

PreferenceRecord build_record(const ParameterSet& base, const TokenLayout& layout,
                              const DatasetConfig& cfg, std::int64_t record_id) {
  const auto& spec = base.spec;
  const auto& wc = cfg.world;
  PreferenceRecord rec;
  rec.record_id = record_id;
  auto scene = make_scene(cfg.seed, record_id, wc);
  const auto& world = scene.world;
  rec.image = std::move(scene.image);
  rec.prompt = {layout.describe()};
  rec.y_gt = gt_response(spec, layout, world);
  for (int attempt = 0;; ++attempt) {
    require(attempt < kMaxRedraws, ErrorKind::data,
            "record " + std::to_string(record_id) + ": base policy keeps emitting empty responses");
    rec.y_gen = policy::sample_response(
        base, rec.prompt, rec.image, cfg.sampling,
        mix_seed({record_seed(cfg.seed, record_id, kSampleStream),
                  static_cast<std::uint64_t>(attempt)}));
    if (rec.y_gen.sentence_count() > 0) break;
  }
  if (!cfg.external_reviser) {
    auto r = revise(spec, layout, rec.y_gen, world, rec.image, wc);
    rec.y_rev = std::move(r.y_rev);
    rec.annotations = std::move(r.annotations);
  }
  return rec;
}

std::vector<PreferenceRecord> build_dataset(const ParameterSet& base, const DatasetConfig& cfg,
                                            Exec exec) {
  require(cfg.n_records >= 0, ErrorKind::config, "n_records must be >= 0");
  cfg.sampling.validate();
  const auto layout = TokenLayout::make(base.spec, cfg.world);
  std::vector<PreferenceRecord> records(cfg.n_records);
  for_each_index(records.size(), exec, [&](std::size_t i) {
    records[i] = build_record(base, layout, cfg, static_cast<std::int64_t>(i));
  });
  return records;
}

std::vector<PreferenceRecord> complete_revisions(const PolicySpec& spec, const WorldConfig& cfg,
                                                 std::vector<PreferenceRecord> records) {
  const auto layout = TokenLayout::make(spec, cfg);
  for (auto& rec : records) {
    if (rec.revised()) {
      validate_record(spec, layout, rec);
      continue;
    }
    const auto world = world_from_gt(layout, rec.y_gt);
    auto r = revise(spec, layout, rec.y_gen, world, rec.image, cfg);
    rec.y_rev = std::move(r.y_rev);
    rec.annotations = std::move(r.annotations);
  }
  return records;
}

std::vector<PreferenceRecord> significantly_revised(const std::vector<PreferenceRecord>& records,
                                                    int min_changed) {
  std::vector<PreferenceRecord> out;
  for (const auto& r : records)
    if (r.revised() && r.changed_sentences() >= min_changed) out.push_back(r);
  return out;
}

int popular_value(int attribute, int n_values) { return attribute % n_values; }

Response prior_response(const PolicySpec& spec, const TokenLayout& layout,
                        const WorldState& world, const PriorConfig& prior, std::uint64_t seed) {
  Rng rng(seed);
  const int A = layout.n_attributes;
  std::vector<int> absent;
  for (int a = 0; a < A; ++a)
    if (!world.present[a]) absent.push_back(a);
  int phantom = -1;
  if (!absent.empty() && rng.bernoulli(prior.phantom_prob))
    phantom = absent[rng.index(absent.size())];
  Tokens t;
  for (int a = 0; a < A; ++a) {
    int v;
    if (world.present[a]) {
      v = rng.bernoulli(prior.popular_bias) ? popular_value(a, layout.n_values) : world.value[a];
    } else if (a == phantom) {
      v = popular_value(a, layout.n_values);
    } else {
      continue;
    }
    t.push_back(layout.attr(a));
    t.push_back(layout.value(v));
    t.push_back(layout.sep());
  }
  t.push_back(layout.eos());
  return Response(spec, std::move(t));
}

std::string serialize_records(const std::vector<PreferenceRecord>& records) {
  std::ostringstream os;
  os << "# record_id\tprompt\timage\ty_gen\ty_gt\ty_rev\ts_hal\ts_img\n";
  for (const auto& r : records) {
    os << r.record_id << '\t' << join_ints(r.prompt) << '\t' << join_reals(r.image.features)
       << '\t' << join_ints(r.y_gen.tokens()) << '\t' << join_ints(r.y_gt.tokens()) << '\t';
    if (r.revised()) {
      std::vector<int> hal;
      std::string img;
      for (std::size_t i = 0; i < r.annotations.size(); ++i) {
        hal.push_back(r.annotations[i].s_hal);
        if (i) img += ',';
        img += to_string(r.annotations[i].s_img);
      }
      os << join_ints(r.y_rev->tokens()) << '\t' << join_ints(hal) << '\t' << img;
    } else {
      os << kPending << '\t' << kPending << '\t' << kPending;
    }
    os << '\n';
  }
  return os.str();
}

namespace {

struct FieldCursor {
  std::size_t line;
  std::vector<std::size_t> columns;  // 1-based start column of each field

  [[noreturn]] void error(std::size_t field, const std::string& what) const {
    static const char* names[] = {"record_id", "prompt", "image", "y_gen",
                                  "y_gt",      "y_rev",  "s_hal", "s_img"};
    fail(ErrorKind::parse, "line " + std::to_string(line) + ", column " +
                               std::to_string(field < columns.size() ? columns[field] : 1) +
                               " (" + names[field] + "): " + what);
  }
};

std::vector<int> parse_int_list(std::string_view s, const FieldCursor& cur, std::size_t field) {
  std::vector<int> out;
  if (s.empty()) return out;
  for (auto part : split(s, ',')) {
    long long v;
    if (!parse_int(part, v) || v < INT32_MIN || v > INT32_MAX)
      cur.error(field, "invalid integer '" + std::string(part) + "'");
    out.push_back(static_cast<int>(v));
  }
  return out;
}

Response parse_response(const PolicySpec& spec, std::string_view s, const FieldCursor& cur,
                        std::size_t field) {
  try {
    return Response(spec, parse_int_list(s, cur, field));
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::parse) throw;
    cur.error(field, e.what());
  }
}

}  // namespace

std::vector<PreferenceRecord> deserialize_records(const PolicySpec& spec, std::string_view text) {
  std::vector<PreferenceRecord> out;
  std::size_t line_no = 0;
  for (auto line : split(text, '\n')) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty() || line.front() == '#') continue;
    const auto fields = split(line, '\t');
    FieldCursor cur{line_no, {}};
    std::size_t col = 1;
    for (const auto& f : fields) {
      cur.columns.push_back(col);
      col += f.size() + 1;
    }
    if (fields.size() != 8)
      fail(ErrorKind::parse, "line " + std::to_string(line_no) + ", column 1: expected 8 " +
                                 "tab-separated fields, found " + std::to_string(fields.size()));
    PreferenceRecord r;
    long long id;
    if (!parse_int(fields[0], id)) cur.error(0, "invalid record id");
    r.record_id = id;
    r.prompt = parse_int_list(fields[1], cur, 1);
    for (int t : r.prompt)
      if (t < 0 || t >= spec.vocab_size) cur.error(1, "prompt token outside vocabulary");
    if (!fields[2].empty())
      for (auto part : split(fields[2], ',')) {
        double v;
        if (!parse_real(part, v) || !std::isfinite(v))
          cur.error(2, "invalid real '" + std::string(part) + "'");
        r.image.features.push_back(v);
      }
    if (static_cast<int>(r.image.features.size()) != spec.image_dim)
      cur.error(2, "expected " + std::to_string(spec.image_dim) + " features");
    r.y_gen = parse_response(spec, fields[3], cur, 3);
    r.y_gt = parse_response(spec, fields[4], cur, 4);
    const bool pending = fields[5] == kPending;
    if (pending != (fields[6] == kPending) || pending != (fields[7] == kPending))
      cur.error(5, "revision columns must be all PENDING or all filled");
    if (!pending) {
      r.y_rev = parse_response(spec, fields[5], cur, 5);
      const auto hal = parse_int_list(fields[6], cur, 6);
      std::vector<std::string_view> img;
      if (!fields[7].empty()) img = split(fields[7], ',');
      if (hal.size() != img.size()) cur.error(7, "s_hal and s_img counts differ");
      if (static_cast<int>(hal.size()) != r.y_rev->sentence_count())
        cur.error(6, "score count does not match y_rev sentences");
      for (std::size_t i = 0; i < hal.size(); ++i) {
        SentenceAnnotation a;
        a.s_hal = hal[i];
        if (a.s_hal < 1 || a.s_hal > 4) cur.error(6, "s_hal outside 1..4");
        try {
          a.s_img = image_label_from_string(std::string(img[i]));
        } catch (const Error& e) {
          cur.error(7, e.what());
        }
        const auto [b, e] = r.y_rev->sentence_spans()[i];
        a.revised_span.assign(r.y_rev->tokens().begin() + b, r.y_rev->tokens().begin() + e);
        r.annotations.push_back(std::move(a));
      }
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace opadpo::synth
