#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace taskattr {

/// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad inputs or configuration. The CLI maps these to exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Numerical failure (singular systems, non-finite values). Exit code 1.
class NumericError : public Error {
public:
    using Error::Error;
};

class TrainingDiverged : public NumericError {
public:
    TrainingDiverged(std::size_t iteration, double loss)
        : NumericError("training diverged at iteration " + std::to_string(iteration) +
                       " (loss = " + std::to_string(loss) + ")"),
          iteration_(iteration) {}

    std::size_t iteration() const noexcept { return iteration_; }

private:
    std::size_t iteration_;
};

class RankDeficient : public NumericError {
public:
    RankDeficient(const std::string& what, std::vector<std::string> columns)
        : NumericError(what), columns_(std::move(columns)) {}

    const std::vector<std::string>& columns() const noexcept { return columns_; }

private:
    std::vector<std::string> columns_;
};

}  // namespace taskattr
