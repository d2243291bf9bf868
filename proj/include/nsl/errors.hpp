#pragma once
#include <stdexcept>
#include <string>

namespace nsl {

/// Root of the library's exception hierarchy.
class error : public std::runtime_error
{
public:
    using std::runtime_error::runtime_error;
};

/// Malformed or out-of-contract input (bad dimensions, non-finite values, ...).
class input_error : public error
{
public:
    using error::error;
};

/// A numerical routine failed (Cholesky, eigen solver).
class numeric_error : public error
{
public:
    using error::error;
};

/// A principal direction whose image W u has zero norm.
class degenerate_factor_error : public input_error
{
public:
    degenerate_factor_error(std::size_t index, const std::string& what)
        : input_error(what), index_(index)
    {}

    std::size_t index() const noexcept { return index_; }

private:
    std::size_t index_;
};

/// A request beyond a combinatorial guard, or one needing data that is not available.
class refusal_error : public error
{
public:
    using error::error;
};

} // namespace nsl
