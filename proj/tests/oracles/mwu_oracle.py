# Brute-force pairwise win count: U_a = #(a_i > b_j) + 0.5 * #(a_i == b_j).
def u(a, b):
    return sum((x > y) + 0.5 * (x == y) for x in a for y in b)
print(u([1, 2, 3, 4], [2, 3, 4, 5]), u([1, 2, 3], [10, 11, 12]), u([5, 6, 7], [5, 6, 7]))
import scipy.stats as st
r = st.mannwhitneyu([1, 2, 3, 4], [2, 3, 4, 5], use_continuity=False, alternative='two-sided', method='asymptotic')
print(r)
r = st.mannwhitneyu([1,2,3,4,5,6], [7,8,9,10,11,12], use_continuity=False, alternative='two-sided', method='asymptotic')
print(r)
