/*
 * Copyright 2026 The Progcast Authors.
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     https://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

// Feature schema: the ordered list of raw visit features and how each one is
// encoded into a token.

#ifndef PROGCAST_SCHEMA_HPP_
#define PROGCAST_SCHEMA_HPP_

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace progcast {

enum class FeatureKind { kNumeric, kCategorical, kDiagnosis };

// Data modality of a feature. COGN, MRI and CSF vary over time; STATIC
// features (demographics, genotype) do not.
enum class Modality : unsigned { kCognitive = 0, kMri = 1, kCsf = 2, kStatic = 3 };

inline constexpr int kNumModalities = 4;

std::string_view to_string(FeatureKind kind);
std::string_view to_string(Modality modality);
FeatureKind parse_feature_kind(std::string_view text);
Modality parse_modality(std::string_view text);

struct FeatureDescriptor {
  std::string name;
  FeatureKind kind = FeatureKind::kNumeric;
  std::vector<std::string> categories;  // kCategorical only
  Modality modality = Modality::kStatic;

  // Columns this feature occupies in the encoded feature block.
  int encoded_width() const;
};

// Ordered feature layout. A token is laid out as
//   [encoded features | one mask bit per descriptor | horizon]
// so token_width() == encoded_width() + mask_width() + 1.
class FeatureSchema {
 public:
  FeatureSchema() = default;
  // Throws Error on duplicate names, empty categorical vocabularies or more
  // than one diagnosis descriptor.
  explicit FeatureSchema(std::vector<FeatureDescriptor> descriptors,
                         std::string age_feature = "age");

  const std::vector<FeatureDescriptor>& descriptors() const { return descriptors_; }
  std::size_t size() const { return descriptors_.size(); }
  const FeatureDescriptor& operator[](std::size_t i) const { return descriptors_[i]; }

  // First encoded column of descriptor i.
  int offset(std::size_t i) const { return offsets_[i]; }
  int encoded_width() const { return encoded_width_; }
  int mask_width() const { return static_cast<int>(descriptors_.size()); }
  int block_width() const { return encoded_width_ + mask_width(); }
  int token_width() const { return block_width() + 1; }

  // Index of the named descriptor, or -1.
  int find(std::string_view name) const;

  // Numeric static feature holding the subject's baseline age in years; the
  // empty string disables age lookup (ages are then reported as zero).
  const std::string& age_feature() const { return age_feature_; }

  // Stable fingerprint of the canonical JSON form.
  std::string hash() const;

  nlohmann::json to_json() const;
  static FeatureSchema from_json(const nlohmann::json& j);

 private:
  std::vector<FeatureDescriptor> descriptors_;
  std::vector<int> offsets_;
  int encoded_width_ = 0;
  std::string age_feature_;
};

// The schema emitted by the synthetic cohort generator: four static
// descriptors, the diagnosis, four cognitive scores, four MRI volumes and two
// CSF measurements.
FeatureSchema synthetic_schema();

}  // namespace progcast

#endif  // PROGCAST_SCHEMA_HPP_
