// Copyright (c) 2026 The wmlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace wmlab {

// Base class for every error raised by the library. Each subclass names one
// failure category so callers (and the CLI exit-code mapping) can dispatch on
// the type instead of parsing messages.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define WMLAB_DEFINE_ERROR(Name)           \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  }

WMLAB_DEFINE_ERROR(ParameterError);         // argument out of range
WMLAB_DEFINE_ERROR(LengthError);            // sequence/context too long, byte-length mismatch
WMLAB_DEFINE_ERROR(CorruptionError);        // non-finite parameter values
WMLAB_DEFINE_ERROR(LookupError);            // unknown tensor name
WMLAB_DEFINE_ERROR(ShapeError);             // tensor shape disagrees with config
WMLAB_DEFINE_ERROR(DivergenceError);        // non-finite training loss
WMLAB_DEFINE_ERROR(FormatError);            // bad magic/version/header in a file
WMLAB_DEFINE_ERROR(IoError);                // unreadable or unwritable path
WMLAB_DEFINE_ERROR(CapacityError);          // not enough data for the request
WMLAB_DEFINE_ERROR(UnsupportedArchitecture);
WMLAB_DEFINE_ERROR(InsufficientEvidence);   // text too short to score
WMLAB_DEFINE_ERROR(DegenerateStatistic);    // e.g. zero gradient norm
WMLAB_DEFINE_ERROR(ConfigError);            // schema validation failure
WMLAB_DEFINE_ERROR(ResourceError);          // unresolved corpus/checkpoint reference

#undef WMLAB_DEFINE_ERROR

}  // namespace wmlab
