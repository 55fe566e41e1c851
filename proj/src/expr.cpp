#include "mrsim/expr.hpp"

#include <array>
#include <cctype>
#include <charconv>
#include <cmath>
#include <sstream>

#include "mrsim/error.hpp"

namespace mrsim::expr {

enum class Kind { constant, variable, add, sub, mul, div, neg, pow, exp, tanh };

struct Node {
    Kind kind;
    double value = 0.0;      // constant value, or exponent for pow
    std::size_t index = 0;   // variable index
    NodePtr a, b;
};

namespace {

NodePtr make_const(double v) { return std::make_shared<Node>(Node{Kind::constant, v, 0, nullptr, nullptr}); }
NodePtr make_var(std::size_t i) { return std::make_shared<Node>(Node{Kind::variable, 0.0, i, nullptr, nullptr}); }

bool is_const(const NodePtr& n, double v) { return n->kind == Kind::constant && n->value == v; }
bool is_const(const NodePtr& n) { return n->kind == Kind::constant; }

NodePtr make_neg(NodePtr a) {
    if (is_const(a)) return make_const(-a->value);
    if (a->kind == Kind::neg) return a->a;
    return std::make_shared<Node>(Node{Kind::neg, 0.0, 0, std::move(a), nullptr});
}

NodePtr make_add(NodePtr a, NodePtr b) {
    if (is_const(a) && is_const(b)) return make_const(a->value + b->value);
    if (is_const(a, 0.0)) return b;
    if (is_const(b, 0.0)) return a;
    return std::make_shared<Node>(Node{Kind::add, 0.0, 0, std::move(a), std::move(b)});
}

NodePtr make_sub(NodePtr a, NodePtr b) {
    if (is_const(a) && is_const(b)) return make_const(a->value - b->value);
    if (is_const(b, 0.0)) return a;
    if (is_const(a, 0.0)) return make_neg(std::move(b));
    return std::make_shared<Node>(Node{Kind::sub, 0.0, 0, std::move(a), std::move(b)});
}

NodePtr make_mul(NodePtr a, NodePtr b) {
    if (is_const(a) && is_const(b)) return make_const(a->value * b->value);
    if (is_const(a, 0.0) || is_const(b, 0.0)) return make_const(0.0);
    if (is_const(a, 1.0)) return b;
    if (is_const(b, 1.0)) return a;
    if (is_const(a, -1.0)) return make_neg(std::move(b));
    if (is_const(b, -1.0)) return make_neg(std::move(a));
    return std::make_shared<Node>(Node{Kind::mul, 0.0, 0, std::move(a), std::move(b)});
}

NodePtr make_div(NodePtr a, NodePtr b) {
    if (is_const(a) && is_const(b)) return make_const(a->value / b->value);
    if (is_const(a, 0.0)) return make_const(0.0);
    if (is_const(b, 1.0)) return a;
    return std::make_shared<Node>(Node{Kind::div, 0.0, 0, std::move(a), std::move(b)});
}

NodePtr make_pow(NodePtr a, double c) {
    if (c == 0.0) return make_const(1.0);
    if (c == 1.0) return a;
    if (is_const(a)) return make_const(std::pow(a->value, c));
    return std::make_shared<Node>(Node{Kind::pow, c, 0, std::move(a), nullptr});
}

NodePtr make_unary(Kind k, NodePtr a) {
    if (is_const(a)) return make_const(k == Kind::exp ? std::exp(a->value) : std::tanh(a->value));
    return std::make_shared<Node>(Node{k, 0.0, 0, std::move(a), nullptr});
}

NodePtr differentiate(const NodePtr& n, std::size_t var) {
    switch (n->kind) {
        case Kind::constant: return make_const(0.0);
        case Kind::variable: return make_const(n->index == var ? 1.0 : 0.0);
        case Kind::add: return make_add(differentiate(n->a, var), differentiate(n->b, var));
        case Kind::sub: return make_sub(differentiate(n->a, var), differentiate(n->b, var));
        case Kind::neg: return make_neg(differentiate(n->a, var));
        case Kind::mul:
            return make_add(make_mul(differentiate(n->a, var), n->b), make_mul(n->a, differentiate(n->b, var)));
        case Kind::div: {
            auto num = make_sub(make_mul(differentiate(n->a, var), n->b), make_mul(n->a, differentiate(n->b, var)));
            return make_div(std::move(num), make_pow(n->b, 2.0));
        }
        case Kind::pow:
            return make_mul(make_mul(make_const(n->value), make_pow(n->a, n->value - 1.0)), differentiate(n->a, var));
        case Kind::exp: return make_mul(n, differentiate(n->a, var));
        case Kind::tanh:
            return make_mul(make_sub(make_const(1.0), make_pow(n, 2.0)), differentiate(n->a, var));
    }
    fail(ErrorCode::internal, "unreachable expression kind");
}

bool node_depends(const NodePtr& n, std::size_t var) {
    if (!n) return false;
    if (n->kind == Kind::variable) return n->index == var;
    return node_depends(n->a, var) || node_depends(n->b, var);
}

void print(const NodePtr& n, const std::vector<std::string>* names, std::ostringstream& os) {
    switch (n->kind) {
        case Kind::constant: os << n->value; return;
        case Kind::variable:
            if (names && n->index < names->size()) os << (*names)[n->index];
            else os << "v" << n->index;
            return;
        case Kind::neg: os << "(-"; print(n->a, names, os); os << ")"; return;
        case Kind::pow: os << "pow("; print(n->a, names, os); os << ", " << n->value << ")"; return;
        case Kind::exp: os << "exp("; print(n->a, names, os); os << ")"; return;
        case Kind::tanh: os << "tanh("; print(n->a, names, os); os << ")"; return;
        default: break;
    }
    const char* op = n->kind == Kind::add ? " + " : n->kind == Kind::sub ? " - " : n->kind == Kind::mul ? " * " : " / ";
    os << "(";
    print(n->a, names, os);
    os << op;
    print(n->b, names, os);
    os << ")";
}

class Parser {
public:
    Parser(std::string_view text, const std::vector<std::string>& vars) : text_(text), vars_(vars) {}

    NodePtr parse() {
        NodePtr n = expression();
        skip_ws();
        if (pos_ != text_.size()) error("unexpected '" + std::string(1, text_[pos_]) + "'");
        return n;
    }

private:
    [[noreturn]] void error(const std::string& msg) const {
        fail(ErrorCode::config, "expression '" + std::string(text_) + "' at offset " + std::to_string(pos_) + ": " + msg);
    }

    void skip_ws() {
        while (pos_ < text_.size() && std::isspace(static_cast<unsigned char>(text_[pos_]))) ++pos_;
    }

    bool accept(char c) {
        skip_ws();
        if (pos_ < text_.size() && text_[pos_] == c) {
            ++pos_;
            return true;
        }
        return false;
    }

    void expect(char c) {
        if (!accept(c)) error(std::string("expected '") + c + "'");
    }

    NodePtr expression() {
        NodePtr lhs = term();
        for (;;) {
            if (accept('+')) lhs = make_add(lhs, term());
            else if (accept('-')) lhs = make_sub(lhs, term());
            else return lhs;
        }
    }

    NodePtr term() {
        NodePtr lhs = unary();
        for (;;) {
            if (accept('*')) lhs = make_mul(lhs, unary());
            else if (accept('/')) lhs = make_div(lhs, unary());
            else return lhs;
        }
    }

    NodePtr unary() {
        if (accept('-')) return make_neg(unary());
        if (accept('+')) return unary();
        return power();
    }

    NodePtr power() {
        NodePtr base = primary();
        if (accept('^')) {
            NodePtr ex = unary();
            if (!is_const(ex)) error("exponent must be a constant");
            return make_pow(base, ex->value);
        }
        return base;
    }

    NodePtr primary() {
        skip_ws();
        if (pos_ >= text_.size()) error("unexpected end of input");
        const char c = text_[pos_];
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number();
        if (std::isalpha(static_cast<unsigned char>(c)) || c == '_') {
            const std::size_t start = pos_;
            while (pos_ < text_.size() &&
                   (std::isalnum(static_cast<unsigned char>(text_[pos_])) || text_[pos_] == '_'))
                ++pos_;
            const std::string name(text_.substr(start, pos_ - start));
            if (accept('(')) return call(name);
            for (std::size_t i = 0; i < vars_.size(); ++i)
                if (vars_[i] == name) return make_var(i);
            pos_ = start;
            error("unknown variable '" + name + "'");
        }
        if (accept('(')) {
            NodePtr n = expression();
            expect(')');
            return n;
        }
        error("unexpected '" + std::string(1, c) + "'");
    }

    NodePtr call(const std::string& name) {
        std::vector<NodePtr> args{expression()};
        while (accept(',')) args.push_back(expression());
        expect(')');
        if (name == "exp" && args.size() == 1) return make_unary(Kind::exp, args[0]);
        if (name == "tanh" && args.size() == 1) return make_unary(Kind::tanh, args[0]);
        if (name == "pow" && args.size() == 2) {
            if (!is_const(args[1])) error("pow exponent must be a constant");
            return make_pow(args[0], args[1]->value);
        }
        error("unknown function '" + name + "' with " + std::to_string(args.size()) + " argument(s)");
    }

    NodePtr number() {
        const char* begin = text_.data() + pos_;
        const char* end = text_.data() + text_.size();
        double v = 0.0;
        const auto res = std::from_chars(begin, end, v);
        if (res.ec != std::errc()) error("bad number");
        pos_ += static_cast<std::size_t>(res.ptr - begin);
        return make_const(v);
    }

    std::string_view text_;
    const std::vector<std::string>& vars_;
    std::size_t pos_ = 0;
};

enum OpCode { op_const, op_var, op_add, op_sub, op_mul, op_div, op_neg, op_pow, op_exp, op_tanh };

}  // namespace

Expression::Expression() : Expression(make_const(0.0), 0) {}

Expression::Expression(NodePtr root, std::size_t arity) : root_(std::move(root)), arity_(arity) { compile(); }

Expression Expression::parse(std::string_view text, const std::vector<std::string>& variables) {
    return Expression(Parser(text, variables).parse(), variables.size());
}

Expression Expression::constant(double value) { return Expression(make_const(value), 0); }

Expression Expression::variable(std::size_t index, std::size_t arity) {
    require(index < arity, ErrorCode::invalid_argument, "variable index out of range");
    return Expression(make_var(index), arity);
}

Expression operator*(const Expression& a, const Expression& b) {
    return Expression(make_mul(a.root_, b.root_), std::max(a.arity_, b.arity_));
}

Expression operator+(const Expression& a, const Expression& b) {
    return Expression(make_add(a.root_, b.root_), std::max(a.arity_, b.arity_));
}

void Expression::compile() {
    program_.clear();
    std::size_t depth = 0;
    max_stack_ = 1;
    auto emit = [&](auto&& self, const NodePtr& n) -> void {
        switch (n->kind) {
            case Kind::constant: program_.push_back({op_const, n->value, 0}); ++depth; break;
            case Kind::variable: program_.push_back({op_var, 0.0, n->index}); ++depth; break;
            case Kind::neg: self(self, n->a); program_.push_back({op_neg, 0.0, 0}); break;
            case Kind::pow: self(self, n->a); program_.push_back({op_pow, n->value, 0}); break;
            case Kind::exp: self(self, n->a); program_.push_back({op_exp, 0.0, 0}); break;
            case Kind::tanh: self(self, n->a); program_.push_back({op_tanh, 0.0, 0}); break;
            default: {
                self(self, n->a);
                self(self, n->b);
                const int code = n->kind == Kind::add ? op_add : n->kind == Kind::sub ? op_sub
                                 : n->kind == Kind::mul ? op_mul : op_div;
                program_.push_back({code, 0.0, 0});
                --depth;
            }
        }
        max_stack_ = std::max(max_stack_, depth);
    };
    emit(emit, root_);
}

double Expression::eval(std::span<const double> vars) const {
    constexpr std::size_t kInline = 32;
    std::array<double, kInline> small{};
    std::vector<double> large;
    double* stack = small.data();
    if (max_stack_ > kInline) {
        large.resize(max_stack_);
        stack = large.data();
    }
    std::size_t sp = 0;
    for (const Op& op : program_) {
        switch (op.code) {
            case op_const: stack[sp++] = op.value; break;
            case op_var: stack[sp++] = vars[op.index]; break;
            case op_add: --sp; stack[sp - 1] += stack[sp]; break;
            case op_sub: --sp; stack[sp - 1] -= stack[sp]; break;
            case op_mul: --sp; stack[sp - 1] *= stack[sp]; break;
            case op_div: --sp; stack[sp - 1] /= stack[sp]; break;
            case op_neg: stack[sp - 1] = -stack[sp - 1]; break;
            case op_pow: {
                const double x = stack[sp - 1];
                stack[sp - 1] = op.value == 2.0 ? x * x : std::pow(x, op.value);
                break;
            }
            case op_exp: stack[sp - 1] = std::exp(stack[sp - 1]); break;
            case op_tanh: stack[sp - 1] = std::tanh(stack[sp - 1]); break;
        }
    }
    return stack[0];
}

Expression Expression::derivative(std::size_t index) const {
    return Expression(differentiate(root_, index), arity_);
}

std::optional<double> Expression::constant_value() const {
    if (root_->kind == Kind::constant) return root_->value;
    return std::nullopt;
}

bool Expression::depends_on(std::size_t index) const { return node_depends(root_, index); }

std::string Expression::to_string() const {
    std::ostringstream os;
    os.precision(17);
    print(root_, nullptr, os);
    return os.str();
}

std::vector<std::string> indexed_names(const std::string& prefix, std::size_t n) {
    std::vector<std::string> out;
    out.reserve(n);
    for (std::size_t i = 1; i <= n; ++i) out.push_back(prefix + std::to_string(i));
    return out;
}

}  // namespace mrsim::expr
