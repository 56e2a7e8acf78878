#pragma once

#include <stdexcept>
#include <string>

namespace rlab {

// Every failure raised by the library derives from Error. The `kind()` tag is
// what the CLI prints on its machine-readable error line.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define RLAB_DEFINE_ERROR(Name, tag)                                 \
  class Name : public Error {                                        \
   public:                                                           \
    explicit Name(const std::string& what) : Error(tag, what) {}     \
  }

RLAB_DEFINE_ERROR(ShapeError, "shape");
RLAB_DEFINE_ERROR(ContractError, "contract");
RLAB_DEFINE_ERROR(GraphError, "graph");
RLAB_DEFINE_ERROR(NumericError, "numeric");
RLAB_DEFINE_ERROR(VocabError, "vocabulary");
RLAB_DEFINE_ERROR(LengthError, "length");
RLAB_DEFINE_ERROR(ReferenceError, "reference");
RLAB_DEFINE_ERROR(FormatError, "format");
RLAB_DEFINE_ERROR(CorruptionError, "corruption");
RLAB_DEFINE_ERROR(DataError, "data");
RLAB_DEFINE_ERROR(TrainingError, "training");
RLAB_DEFINE_ERROR(ConfigError, "config");
RLAB_DEFINE_ERROR(DependencyError, "dependency");
RLAB_DEFINE_ERROR(IoError, "io");

#undef RLAB_DEFINE_ERROR

}  // namespace rlab
