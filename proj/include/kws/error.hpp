#pragma once

#include <stdexcept>
#include <string>

namespace kws {

// Base for every error the toolkit raises on purpose. The CLI maps these to
// exit codes; anything else escaping is a bug.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define KWS_DEFINE_ERROR(Name)             \
  class Name : public Error {              \
   public:                                 \
    using Error::Error;                    \
  };

KWS_DEFINE_ERROR(FormatError)
KWS_DEFINE_ERROR(UnsupportedError)
KWS_DEFINE_ERROR(DatasetError)
KWS_DEFINE_ERROR(SplitError)
KWS_DEFINE_ERROR(DspError)
KWS_DEFINE_ERROR(ShapeError)
KWS_DEFINE_ERROR(UsageError)
KWS_DEFINE_ERROR(ConfigError)
KWS_DEFINE_ERROR(DataError)
KWS_DEFINE_ERROR(CheckpointError)
KWS_DEFINE_ERROR(IoError)

#undef KWS_DEFINE_ERROR

}  // namespace kws
