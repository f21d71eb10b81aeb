#pragma once

#include <stdexcept>

namespace conceptlm {

struct ConfigurationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace conceptlm
