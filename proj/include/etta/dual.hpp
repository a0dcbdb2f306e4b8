#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>

namespace etta {

// First-order dual number: value + directional tangent. Running a gradient
// routine on Dual inputs yields exact Hessian-vector products
// (forward-over-reverse), which is how second-order meta-gradients are built.
struct Dual {
    double v = 0.0; // value
    double d = 0.0; // tangent

    Dual() = default;
    Dual(double value) : v(value) {} // NOLINT(google-explicit-constructor)
    Dual(double value, double tangent) : v(value), d(tangent) {}

    Dual& operator+=(const Dual& o) { v += o.v; d += o.d; return *this; }
    Dual& operator-=(const Dual& o) { v -= o.v; d -= o.d; return *this; }
    Dual& operator*=(const Dual& o) { d = d * o.v + v * o.d; v *= o.v; return *this; }
    Dual& operator/=(const Dual& o) { d = (d * o.v - v * o.d) / (o.v * o.v); v /= o.v; return *this; }
};

inline Dual operator+(Dual a, const Dual& b) { a += b; return a; }
inline Dual operator-(Dual a, const Dual& b) { a -= b; return a; }
inline Dual operator*(Dual a, const Dual& b) { a *= b; return a; }
inline Dual operator/(Dual a, const Dual& b) { a /= b; return a; }
inline Dual operator-(const Dual& a) { return {-a.v, -a.d}; }
inline Dual operator+(const Dual& a) { return a; }

inline bool operator==(const Dual& a, const Dual& b) { return a.v == b.v; }
inline bool operator!=(const Dual& a, const Dual& b) { return a.v != b.v; }
inline bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
inline bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
inline bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
inline bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }

inline Dual sqrt(const Dual& a) {
    double s = std::sqrt(a.v);
    return {s, a.d / (2.0 * s)};
}
inline Dual exp(const Dual& a) {
    double e = std::exp(a.v);
    return {e, a.d * e};
}
inline Dual log(const Dual& a) { return {std::log(a.v), a.d / a.v}; }
inline Dual tanh(const Dual& a) {
    double t = std::tanh(a.v);
    return {t, a.d * (1.0 - t * t)};
}
inline Dual abs(const Dual& a) { return a.v < 0.0 ? -a : a; }
inline const Dual& max(const Dual& a, const Dual& b) { return a.v < b.v ? b : a; }
inline const Dual& min(const Dual& a, const Dual& b) { return b.v < a.v ? b : a; }
inline bool isfinite(const Dual& a) { return std::isfinite(a.v) && std::isfinite(a.d); }

// Scalar-type adaptors so numeric code can be written once for double/Dual.
template <typename S>
inline double value_of(const S& x) { return static_cast<double>(x); }
inline double value_of(const Dual& x) { return x.v; }

template <typename S>
inline double tangent_of(const S&) { return 0.0; }
inline double tangent_of(const Dual& x) { return x.d; }

} // namespace etta

namespace Eigen {

template <>
struct NumTraits<etta::Dual> : NumTraits<double> {
    using Real = etta::Dual;
    using NonInteger = etta::Dual;
    using Literal = double;
    using Nested = etta::Dual;
    enum {
        IsComplex = 0,
        IsInteger = 0,
        IsSigned = 1,
        RequireInitialization = 1,
        ReadCost = 2,
        AddCost = 2,
        MulCost = 4
    };
    static inline etta::Dual epsilon() { return {NumTraits<double>::epsilon(), 0.0}; }
    static inline etta::Dual dummy_precision() { return {NumTraits<double>::dummy_precision(), 0.0}; }
    static inline etta::Dual highest() { return {NumTraits<double>::highest(), 0.0}; }
    static inline etta::Dual lowest() { return {NumTraits<double>::lowest(), 0.0}; }
};

} // namespace Eigen
