# Brute-force 3x3 all-ones valid window sums over the 4x4 matrix 1..16.
m = [[4 * r + c + 1 for c in range(4)] for r in range(4)]
print([[sum(m[r + i][c + j] for i in range(3) for j in range(3)) for c in range(2)] for r in range(2)])
