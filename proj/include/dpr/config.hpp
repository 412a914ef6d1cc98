// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "dpr/errors.hpp"
#include "dpr/model.hpp"
#include "dpr/train.hpp"

namespace dpr {

/// Flat `key = value` run configuration ([section] headers are cosmetic).
/// Unknown keys are rejected. Defaults are the published model defaults.
struct RunConfig {
  // data
  std::string data_path;
  double split_train = 0.7, split_val = 0.1, split_test = 0.2;
  int lookback = 96;
  int horizon = 96;

  // backbone
  int patch_len = 16;
  int patch_stride = 8;
  int hidden_dim = 256;
  int n_blocks = 2;
  double mlp_expansion = 2.0;
  int mlp_hidden = 0;  // 0 = expansion * hidden_dim
  double dropout = 0.1;
  bool use_adapter = true;

  // adapter
  int patterns = 8;
  int context_dim = 0;  // 0 = max(16, hidden/4)
  std::vector<int> kernels = {3, 7};
  double lambda_orth = 1e-4;
  std::string routing = "soft";
  bool multiscale = true;
  bool identity_init = true;

  // training
  double lr = 1e-3;
  int batch_size = 32;
  int patience = 10;
  int max_epochs = 100;
  std::uint64_t seed = 1;
  std::string precision = "double";
  double grad_clip = 0.0;

  static RunConfig parse_file(const std::string& path);
  static RunConfig parse_text(const std::string& text, const std::string& origin = "<config>");

  /// Canonical serialization; equal configs produce equal text (and digest).
  std::string to_text() const;

  void validate() const;

  /// Table 3 ablation switches: mscale, ortho, init, route.
  void apply_ablation(const std::string& name);

  BackboneConfig backbone(int channels) const;
  TrainConfig train_config() const;
};

}  // namespace dpr
