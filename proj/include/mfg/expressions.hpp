#pragma once

#include <cctype>
#include <cmath>
#include <string>
#include <vector>

#include "mfg/common.hpp"

namespace mfg {

// ---------------------------------------------------------------------------
// Small closed-form expression set for spatial coefficients (the b1/b2 fields
// of quadratic running costs and additive potentials of couplings). Supported
// forms, combinable with + and -:
//
//   0.25                      constant
//   affine(b; a1,...,ad)      b + a.x
//   sqdist(amp; c1,...,cd)    amp * |x - c|^2
//   bump(amp, w; c1,...,cd)   amp * exp(-|x - c|^2 / (2 w^2))
//
// Every form is C^2 with derivatives bounded on any bounded box, which is what
// the cost assumptions require on the trajectory region.
// ---------------------------------------------------------------------------

class Expr {
public:
    struct Term {
        enum class Type { Constant, Affine, SqDist, Bump };
        Type type = Type::Constant;
        double sign = 1.0;
        double c0 = 0.0;               // constant / affine offset / amplitude
        double width = 1.0;            // bump width
        std::vector<double> vec;       // affine slope or center
    };

    Expr() { terms_.push_back(Term{}); }  // zero

    static Expr constant(double c) {
        Expr e;
        e.terms_.clear();
        Term t;
        t.type = Term::Type::Constant;
        t.c0 = c;
        e.terms_.push_back(t);
        e.text_ = format_double(c);
        return e;
    }

    static Expr parse(const std::string& text, int dim);

    double eval(const double* x, int dim) const {
        double v = 0.0;
        for (const auto& t : terms_) v += t.sign * term_eval(t, x, dim);
        return v;
    }

    void grad(const double* x, int dim, double* out) const {
        for (int i = 0; i < dim; ++i) out[i] = 0.0;
        for (const auto& t : terms_) term_grad(t, x, dim, out);
    }

    const std::string& text() const { return text_; }

private:
    static double term_eval(const Term& t, const double* x, int dim) {
        switch (t.type) {
            case Term::Type::Constant:
                return t.c0;
            case Term::Type::Affine: {
                double s = t.c0;
                for (int i = 0; i < dim; ++i) s += t.vec[i] * x[i];
                return s;
            }
            case Term::Type::SqDist: {
                double s = 0.0;
                for (int i = 0; i < dim; ++i) {
                    double z = x[i] - t.vec[i];
                    s += z * z;
                }
                return t.c0 * s;
            }
            case Term::Type::Bump: {
                double s = 0.0;
                for (int i = 0; i < dim; ++i) {
                    double z = x[i] - t.vec[i];
                    s += z * z;
                }
                return t.c0 * std::exp(-s / (2.0 * t.width * t.width));
            }
        }
        return 0.0;
    }

    static void term_grad(const Term& t, const double* x, int dim, double* out) {
        switch (t.type) {
            case Term::Type::Constant:
                return;
            case Term::Type::Affine:
                for (int i = 0; i < dim; ++i) out[i] += t.sign * t.vec[i];
                return;
            case Term::Type::SqDist:
                for (int i = 0; i < dim; ++i) out[i] += t.sign * 2.0 * t.c0 * (x[i] - t.vec[i]);
                return;
            case Term::Type::Bump: {
                double s = 0.0;
                for (int i = 0; i < dim; ++i) {
                    double z = x[i] - t.vec[i];
                    s += z * z;
                }
                double w2 = t.width * t.width;
                double e = t.c0 * std::exp(-s / (2.0 * w2));
                for (int i = 0; i < dim; ++i) out[i] += t.sign * e * (-(x[i] - t.vec[i]) / w2);
                return;
            }
        }
    }

    std::vector<Term> terms_;
    std::string text_ = "0";
};

namespace detail {

struct ExprLexer {
    const std::string& s;
    size_t pos = 0;

    explicit ExprLexer(const std::string& str) : s(str) {}

    void skip_ws() {
        while (pos < s.size() && std::isspace(static_cast<unsigned char>(s[pos]))) ++pos;
    }

    bool eof() {
        skip_ws();
        return pos >= s.size();
    }

    char peek() {
        skip_ws();
        return pos < s.size() ? s[pos] : '\0';
    }

    bool consume(char c) {
        skip_ws();
        if (pos < s.size() && s[pos] == c) {
            ++pos;
            return true;
        }
        return false;
    }

    double number() {
        skip_ws();
        size_t start = pos;
        if (pos < s.size() && (s[pos] == '+' || s[pos] == '-')) ++pos;
        while (pos < s.size() &&
               (std::isdigit(static_cast<unsigned char>(s[pos])) || s[pos] == '.' ||
                s[pos] == 'e' || s[pos] == 'E' ||
                ((s[pos] == '+' || s[pos] == '-') && (s[pos - 1] == 'e' || s[pos - 1] == 'E'))))
            ++pos;
        require(pos > start, "expression: expected a number at '" + s.substr(start) + "'");
        return parse_double(s.substr(start, pos - start));
    }

    std::string ident() {
        skip_ws();
        size_t start = pos;
        while (pos < s.size() && (std::isalpha(static_cast<unsigned char>(s[pos])) || s[pos] == '_'))
            ++pos;
        return s.substr(start, pos - start);
    }
};

}  // namespace detail

inline Expr Expr::parse(const std::string& text, int dim) {
    detail::ExprLexer lex(text);
    Expr e;
    e.terms_.clear();
    e.text_ = text;
    double sign = 1.0;
    if (lex.consume('-')) sign = -1.0;
    while (true) {
        require(!lex.eof(), "expression: unexpected end in '" + text + "'");
        Term t;
        t.sign = sign;
        char c = lex.peek();
        if (std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '+') {
            t.type = Term::Type::Constant;
            t.c0 = lex.number();
        } else {
            std::string name = lex.ident();
            require(lex.consume('('), "expression: expected '(' after '" + name + "'");
            auto read_vec = [&](std::vector<double>& v) {
                v.clear();
                do {
                    v.push_back(lex.number());
                } while (lex.consume(','));
                require(static_cast<int>(v.size()) == dim,
                        "expression: '" + name + "' needs " + std::to_string(dim) +
                            " vector components in '" + text + "'");
            };
            if (name == "affine") {
                t.type = Term::Type::Affine;
                t.c0 = lex.number();
                require(lex.consume(';'), "expression: affine(b; a1,...) needs ';'");
                read_vec(t.vec);
            } else if (name == "sqdist") {
                t.type = Term::Type::SqDist;
                t.c0 = lex.number();
                require(lex.consume(';'), "expression: sqdist(amp; c1,...) needs ';'");
                read_vec(t.vec);
            } else if (name == "bump") {
                t.type = Term::Type::Bump;
                t.c0 = lex.number();
                require(lex.consume(','), "expression: bump(amp, w; c1,...) needs ','");
                t.width = lex.number();
                require(t.width > 0.0, "expression: bump width must be > 0");
                require(lex.consume(';'), "expression: bump(amp, w; c1,...) needs ';'");
                read_vec(t.vec);
            } else {
                throw validation_error("expression: unknown form '" + name + "' in '" + text + "'");
            }
            require(lex.consume(')'), "expression: expected ')' in '" + text + "'");
        }
        e.terms_.push_back(t);
        if (lex.eof()) break;
        if (lex.consume('+'))
            sign = 1.0;
        else if (lex.consume('-'))
            sign = -1.0;
        else
            throw validation_error("expression: expected '+' or '-' in '" + text + "'");
    }
    return e;
}

}  // namespace mfg
