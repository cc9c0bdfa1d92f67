"""Random compositions of engine primitives for gradient checks."""

import numpy as np

from kpirl.diffcore import Graph, gradient

UNARY = ("square", "sin", "cos", "exp_sin", "relu", "scale", "neg_shift")
BINARY = ("add", "sub", "mul", "smul", "matvec", "outer_matvec", "concat_slice", "scatter_add", "transpose_matmul")


class Composition:
    """A seeded random expression ``R^n -> R`` built from engine primitives."""

    def __init__(self, seed: int, n: int | None = None, depth: int | None = None):
        self.seed = seed
        self.rng = np.random.default_rng(seed)
        self.n = int(n or self.rng.integers(2, 5))
        self.depth = int(depth or self.rng.integers(3, 8))
        r = self.rng
        self.plan = []
        for _ in range(self.depth):
            if r.random() < 0.45:
                self.plan.append(("u", r.choice(UNARY), float(r.uniform(-1.5, 1.5)), None))
            else:
                op = r.choice(BINARY)
                self.plan.append(("b", op, float(r.uniform(-1.5, 1.5)), r.normal(size=(self.n, self.n)) / np.sqrt(self.n)))
        self.readout = r.normal(size=self.n)
        # bounded away from zero so no gradient entry vanishes below the difference noise
        self.x0 = r.uniform(0.3, 1.2, size=self.n) * r.choice([-1.0, 1.0], size=self.n)

    def __call__(self, g: Graph, x):
        pool = [x]
        r = np.random.default_rng(0)
        for kind, op, c, M in self.plan:
            a = pool[-1]
            b = pool[int(r.integers(len(pool)))]
            if kind == "u":
                if op == "square":
                    y = g.square(a)
                elif op == "sin":
                    y = g.sin(a)
                elif op == "cos":
                    y = g.cos(a)
                elif op == "exp_sin":
                    y = g.exp(g.sin(a))
                elif op == "relu":
                    y = g.relu(g.add(a, g.constant(np.full(self.n, 0.05))))
                elif op == "scale":
                    y = g.scale(a, c)
                else:
                    y = g.sub(g.constant(np.full(self.n, c)), a)
            else:
                if op == "add":
                    y = g.add(a, b)
                elif op == "sub":
                    y = g.sub(a, b)
                elif op == "mul":
                    y = g.mul(a, b)
                elif op == "smul":
                    y = g.smul(g.dot(a, g.constant(M[0])), b)
                elif op == "matvec":
                    y = g.add(g.matvec(g.constant(M), a), b)
                elif op == "outer_matvec":
                    y = g.matvec(g.scale(g.outer(a, b), 0.5), g.constant(M[0]))
                elif op == "concat_slice":
                    both = g.concat([g.reshape(a, (1, self.n)), g.reshape(b, (1, self.n))], axis=0)
                    y = g.add(g.reshape(g.slice(both, (slice(0, 1),)), (self.n,)),
                              g.reshape(g.slice(both, (slice(1, 2),)), (self.n,)))
                elif op == "scatter_add":
                    head = g.slice(a, slice(0, 1))
                    y = g.add(g.scatter(head, slice(0, 1), (self.n,)), g.scale(b, c))
                else:
                    col = g.reshape(a, (self.n, 1))
                    y = g.reshape(g.matmul(g.transpose(g.constant(M)), g.matmul(col, g.reshape(b, (1, self.n)))),
                                  (self.n * self.n,))
                    y = g.matvec(g.constant(np.kron(np.eye(self.n), np.ones(self.n)) / self.n), y)
            pool.append(y)
        return g.dot(pool[-1], g.constant(self.readout))

    def hessian_probe(self, g: Graph, x):
        """``w . grad f(x)``: a scalar whose gradient is a Hessian-vector product."""
        y = g.add(x, g.variable(np.zeros(self.n)))
        (dy,) = gradient(self(g, y), [y])
        return g.dot(dy, g.constant(self.readout[::-1].copy()))


def _value(f, x) -> float:
    g = Graph()
    return float(f(g, g.constant(x)).value)


def fd_conditioned(f, x, epsilon: float, ratio: float = 1e-3) -> bool:
    """True when every central-difference entry clears the rounding noise of ``f``.

    Central differences carry an absolute error near ``u |f| / epsilon``; an
    entry much smaller than ``|f|`` cannot be checked to 1e-6 relative in
    float64 whatever the engine does.
    """
    scale = max(1.0, abs(_value(f, x)))
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = epsilon
        d = (_value(f, x + e) - _value(f, x - e)) / (2 * epsilon)
        if abs(d) < ratio * scale:
            return False
    return True


def conditioned_cases(count: int, order: int, start: int = 0):
    """First ``count`` seeds from ``start`` whose check is well conditioned."""
    eps = 1e-6 if order == 1 else 1e-5
    seed = start
    out = []
    while len(out) < count:
        c = Composition(seed)
        f = c if order == 1 else c.hessian_probe
        if fd_conditioned(f, c.x0, eps):
            out.append(c)
        seed += 1
    return out
