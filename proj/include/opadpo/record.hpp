// Copyright 2026 The opadpo Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "opadpo/policy.hpp"

namespace opadpo {

/// Error category attached to a generated sentence by the reviser.
enum class ImageLabel : std::uint8_t {
  correct = 0,
  language_comprehension_error = 1,
  image_recognition_error = 2,
};

const char* to_string(ImageLabel label);
/// Throws parse error for unknown labels.
ImageLabel image_label_from_string(const std::string& s);

/// Reviser verdict for one generated sentence.
struct SentenceAnnotation {
  int s_hal = 4;  // 1..4, 4 = no hallucination
  ImageLabel s_img = ImageLabel::correct;
  policy::Tokens revised_span;

  friend bool operator==(const SentenceAnnotation&, const SentenceAnnotation&) = default;
};

/// One training example. `y_rev` is empty while an external reviser has
/// not yet filled it in (the PENDING state of the dataset file).
struct PreferenceRecord {
  std::int64_t record_id = 0;
  policy::Tokens prompt;
  policy::ImageFeatures image;
  policy::Response y_gen;
  policy::Response y_gt;
  std::optional<policy::Response> y_rev;
  std::vector<SentenceAnnotation> annotations;

  bool revised() const { return y_rev.has_value(); }
  /// Number of generated sentences whose revision differs from the original.
  int changed_sentences() const;

  friend bool operator==(const PreferenceRecord&, const PreferenceRecord&) = default;
};

}  // namespace opadpo
