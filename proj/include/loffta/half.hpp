// Copyright (c) 2026 The loffta Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>

namespace loffta {

/// IEEE 754 binary16 conversions, round-to-nearest-even. Values beyond the
/// half range become +/-Inf; callers that need finiteness check first.
uint16_t float_to_half(float value) noexcept;
float half_to_float(uint16_t bits) noexcept;

/// Largest finite binary16 magnitude.
inline constexpr float kHalfMax = 65504.0f;

}  // namespace loffta
