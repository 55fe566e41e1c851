#pragma once

// Small arithmetic expression language used for coefficients and
// constraint functions in run configurations.
//
//   expr    := term (('+' | '-') term)*
//   term    := unary (('*' | '/') unary)*
//   unary   := '-' unary | power
//   power   := primary ('^' unary)?
//   primary := number | name | name '(' expr (',' expr)* ')' | '(' expr ')'
//
// Functions: exp(u), tanh(u), pow(u, c). Exponents must be constant.

#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace mrsim::expr {

struct Node;
using NodePtr = std::shared_ptr<const Node>;

class Expression {
public:
    Expression();  // the constant 0

    static Expression parse(std::string_view text, const std::vector<std::string>& variables);
    static Expression constant(double value);
    static Expression variable(std::size_t index, std::size_t arity);

    double eval(std::span<const double> vars) const;

    /// Symbolic partial derivative with respect to variable `index`.
    Expression derivative(std::size_t index) const;

    std::optional<double> constant_value() const;
    bool depends_on(std::size_t index) const;
    std::size_t arity() const noexcept { return arity_; }
    std::string to_string() const;

    friend Expression operator*(const Expression& a, const Expression& b);
    friend Expression operator+(const Expression& a, const Expression& b);

private:
    Expression(NodePtr root, std::size_t arity);
    void compile();

    struct Op {
        int code;
        double value;
        std::size_t index;
    };

    NodePtr root_;
    std::size_t arity_ = 0;
    std::vector<Op> program_;
    std::size_t max_stack_ = 1;
};

/// Names `prefix1 .. prefixN`.
std::vector<std::string> indexed_names(const std::string& prefix, std::size_t n);

}  // namespace mrsim::expr
