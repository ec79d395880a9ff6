#pragma once

#include <stdexcept>
#include <string>

namespace qmoe {

enum class Errc {
  invalid_argument = 1,
  corrupt_data,
  dictionary_mismatch,
  io,
  numerical,
};

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, const char* what) {
  if (!cond) [[unlikely]] fail(Errc::invalid_argument, what);
}

}  // namespace qmoe
