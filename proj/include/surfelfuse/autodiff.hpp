#pragma once

// Minimal tape-based reverse-mode differentiation for scalar code.
//
// Every Var records at most two parents with their local partials. A Tape is
// owned by one thread; Vars hold a pointer to it and must not outlive it.

#include <cmath>
#include <cstdint>
#include <vector>

namespace surfelfuse::ad {

class Tape {
public:
    std::uint32_t push_leaf() { return push(0.0, kNone, 0.0, kNone); }

    std::uint32_t push(double pa, std::uint32_t a, double pb, std::uint32_t b) {
        nodes_.push_back({{pa, pb}, {a, b}});
        return static_cast<std::uint32_t>(nodes_.size() - 1);
    }

    void clear() {
        nodes_.clear();
        adjoints_.clear();
    }

    std::size_t size() const { return nodes_.size(); }

    /// Seeds output adjoints and sweeps the tape backwards once.
    void backward(const std::vector<std::pair<std::uint32_t, double>>& seeds) {
        adjoints_.assign(nodes_.size(), 0.0);
        for (const auto& [idx, g] : seeds) adjoints_[idx] += g;
        for (std::size_t i = nodes_.size(); i-- > 0;) {
            const double g = adjoints_[i];
            if (g == 0.0) continue;
            const Node& n = nodes_[i];
            if (n.parent[0] != kNone) adjoints_[n.parent[0]] += g * n.partial[0];
            if (n.parent[1] != kNone) adjoints_[n.parent[1]] += g * n.partial[1];
        }
    }

    double adjoint(std::uint32_t idx) const { return adjoints_[idx]; }

    static constexpr std::uint32_t kNone = 0xffffffffu;

private:
    struct Node {
        double partial[2];
        std::uint32_t parent[2];
    };
    std::vector<Node> nodes_;
    std::vector<double> adjoints_;
};

class Var {
public:
    Var() = default;
    Var(double v) : value_(v) {}  // NOLINT: constants convert implicitly
    Var(Tape* tape, double v) : tape_(tape), index_(tape->push_leaf()), value_(v) {}

    double value() const { return value_; }
    std::uint32_t index() const { return index_; }
    Tape* tape() const { return tape_; }
    bool is_constant() const { return tape_ == nullptr; }

    static Var unary(const Var& a, double v, double da) {
        if (a.is_constant()) return Var(v);
        return Var(a.tape_, a.tape_->push(da, a.index_, 0.0, Tape::kNone), v);
    }

    static Var binary(const Var& a, const Var& b, double v, double da, double db) {
        if (a.is_constant() && b.is_constant()) return Var(v);
        if (a.is_constant()) return unary(b, v, db);
        if (b.is_constant()) return unary(a, v, da);
        return Var(a.tape_, a.tape_->push(da, a.index_, db, b.index_), v);
    }

    Var& operator+=(const Var& o) { return *this = *this + o; }
    Var& operator-=(const Var& o) { return *this = *this - o; }
    Var& operator*=(const Var& o) { return *this = *this * o; }
    Var& operator/=(const Var& o) { return *this = *this / o; }

    friend Var operator+(const Var& a, const Var& b) { return binary(a, b, a.value_ + b.value_, 1.0, 1.0); }
    friend Var operator-(const Var& a, const Var& b) { return binary(a, b, a.value_ - b.value_, 1.0, -1.0); }
    friend Var operator*(const Var& a, const Var& b) {
        return binary(a, b, a.value_ * b.value_, b.value_, a.value_);
    }
    friend Var operator/(const Var& a, const Var& b) {
        const double inv = 1.0 / b.value_;
        return binary(a, b, a.value_ * inv, inv, -a.value_ * inv * inv);
    }
    friend Var operator-(const Var& a) { return unary(a, -a.value_, -1.0); }

    friend bool operator<(const Var& a, const Var& b) { return a.value_ < b.value_; }
    friend bool operator>(const Var& a, const Var& b) { return a.value_ > b.value_; }

private:
    Var(Tape* tape, std::uint32_t index, double v) : tape_(tape), index_(index), value_(v) {}

    Tape* tape_ = nullptr;
    std::uint32_t index_ = Tape::kNone;
    double value_ = 0.0;
};

inline Var sqrt(const Var& a) {
    const double s = std::sqrt(a.value());
    return Var::unary(a, s, 0.5 / s);
}
inline Var exp(const Var& a) {
    const double e = std::exp(a.value());
    return Var::unary(a, e, e);
}
inline Var log(const Var& a) { return Var::unary(a, std::log(a.value()), 1.0 / a.value()); }

inline double value_of(const Var& v) { return v.value(); }

}  // namespace surfelfuse::ad

namespace surfelfuse {
inline double value_of(double v) { return v; }
}  // namespace surfelfuse
