"""Derive the bump normalization and mean radius with mpmath.

In polar coordinates the integral of exp(-1 / (1 - r^2)) over the unit disc is
``2 pi * int_0^1 r exp(-1 / (1 - r^2)) dr``.
"""
import mpmath as mp

mp.mp.dps = 40


def main():
    f = lambda r: mp.exp(-1 / (1 - r**2)) if r < 1 else mp.mpf(0)
    mass = 2 * mp.pi * mp.quad(lambda r: r * f(r), [0, 0.5, 0.9, 1])
    first = 2 * mp.pi * mp.quad(lambda r: r * r * f(r), [0, 0.5, 0.9, 1])
    print("normalization", mp.nstr(1 / mass, 20))
    print("mean_radius  ", mp.nstr(first / mass, 20))


if __name__ == "__main__":
    main()
