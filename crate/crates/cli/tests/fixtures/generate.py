"""Regenerates the synthetic panel and trade fixtures (numpy, fixed seed)."""
import numpy as np

rng = np.random.default_rng(20240101)
countries = ["US", "JP", "DE", "UK", "FR", "IT", "CA", "AU", "CH", "KR"]
variables = ["gdp", "cpi", "eq", "lr", "sr"]
k, n, quarters = len(variables), len(countries), 164
years = list(range(1976, 2020))

base = rng.uniform(0.5, 5.0, size=(n, n))
np.fill_diagonal(base, 0.0)
flows = []
level = base.copy()
for _ in years:
    level = level * np.exp(rng.normal(0.03, 0.08, size=(n, n)))
    np.fill_diagonal(level, 0.0)
    flows.append(np.round(level * 1000.0, 3))

a = 0.5 * np.eye(k) + 0.05 * rng.normal(size=(k, k))
b = 0.6 * np.eye(n) + 0.03 * rng.normal(size=(n, n))
c = 0.2 * np.eye(k)
trend = rng.normal(0.5, 0.2, size=(k, n))
dx = np.zeros((k, n))
x = np.zeros((k, n)) + 100.0
rows = []
for t in range(quarters):
    w = flows[3 + t // 4] / flows[3 + t // 4].sum(axis=1, keepdims=True)
    shock = rng.normal(size=(k, n))
    dx = np.linalg.solve(np.eye(k * n) - np.kron(w, c), (a @ dx @ b.T + shock).reshape(-1, order="F")).reshape((k, n), order="F")
    x = x + trend + dx
    for v in range(k):
        for j in range(n):
            rows.append(f"{t},{variables[v]},{countries[j]},{x[v, j]:.6f}")

with open("panel.csv", "w") as f:
    f.write("t,variable,country,value\n" + "\n".join(rows) + "\n")
with open("trade.csv", "w") as f:
    f.write("year,reporter,partner,value\n")
    for y, m in zip(years, flows):
        for i in range(n):
            for j in range(n):
                if i != j:
                    f.write(f"{y},{countries[i]},{countries[j]},{m[i, j]:.3f}\n")
