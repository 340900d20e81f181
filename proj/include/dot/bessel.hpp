#pragma once

#include <cmath>
#include <limits>
#include <numbers>

namespace dot {

/// Modified Bessel function of the second kind, order zero.
///
/// x <= 2 : ascending series K0 = -(ln(x/2) + gamma) I0(x) + sum (x^2/4)^k H_k / (k!)^2
/// x < 25 : Steed's continued fraction (Temme's CF2), which converges fast there
/// x >= 25: large-argument asymptotic expansion, truncated at its smallest term
template <typename T>
T bessel_k0(T x) {
    using std::abs;
    using std::exp;
    using std::log;
    using std::sqrt;
    if (!(x > T(0))) return std::numeric_limits<T>::quiet_NaN();
    const T eps = std::numeric_limits<T>::epsilon();
    if (x <= T(2)) {
        const T q = x * x / T(4);
        T term = T(1);
        T i0 = T(1);
        T tail = T(0);
        T harmonic = T(0);
        for (int k = 1; k < 200; ++k) {
            term *= q / (T(k) * T(k));
            harmonic += T(1) / T(k);
            i0 += term;
            tail += term * harmonic;
            if (term * harmonic < eps * abs(tail)) break;
        }
        return -(log(x / T(2)) + T(std::numbers::egamma)) * i0 + tail;
    }
    const T prefactor = sqrt(T(std::numbers::pi) / (T(2) * x)) * exp(-x);
    if (x < T(25)) {
        T b = T(2) * (T(1) + x);
        T d = T(1) / b;
        T h = d, delh = d;
        T q1 = T(0), q2 = T(1);
        const T a1 = T(0.25);
        T q = a1, c = a1, a = -a1;
        T s = T(1) + q * delh;
        for (int i = 1; i < 10000; ++i) {
            a -= T(2 * i);
            c = -a * c / T(i + 1);
            const T qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += T(2);
            d = T(1) / (b + a * d);
            delh = (b * d - T(1)) * delh;
            h += delh;
            const T dels = q * delh;
            s += dels;
            if (abs(dels / s) < eps) break;
        }
        return prefactor / s;
    }
    T sum = T(1), term = T(1);
    for (int k = 1; k < 60; ++k) {
        const T odd = T(2 * k - 1);
        const T next = term * (-odd * odd) / (T(k) * T(8) * x);
        if (abs(next) >= abs(term)) break;
        term = next;
        sum += term;
        if (abs(term) < eps * abs(sum)) break;
    }
    return prefactor * sum;
}

}  // namespace dot
