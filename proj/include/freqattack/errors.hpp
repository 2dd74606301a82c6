// Exception types thrown by the freqattack library.
#pragma once

#include <stdexcept>
#include <string>

namespace freqattack {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DimensionError : public Error { public: using Error::Error; };
class ShapeMismatch : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class RangeError : public Error { public: using Error::Error; };
class DegenerateInput : public Error { public: using Error::Error; };
class EmptyEnsemble : public Error { public: using Error::Error; };
class EmptyInput : public Error { public: using Error::Error; };
class PreconditionError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class DivergenceError : public Error { public: using Error::Error; };
class WindowTooLarge : public Error { public: using Error::Error; };
class IoError : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };

} // namespace freqattack
