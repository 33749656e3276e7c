//! Factorization of spatial dimensions into a stack of non-overlapping
//! depthwise kernels. Each stage has kernel equal to stride, so composing all
//! stages collapses the (padded) image to a single value per channel.

/// One depthwise stage; kernel extent equals stride in both dimensions.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Stage {
    pub k_h: usize,
    pub k_w: usize,
    pub s_h: usize,
    pub s_w: usize,
}

/// A planned kernel stack: the padded spatial extent and the orderd stages
/// that reduce it to (1, 1).
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DwckPlan {
    pub pad_to: (usize, usize),
    pub stages: Vec<Stage>,
}

impl DwckPlan {
    /// Number of per-channel weights in the whole stack.
    pub fn weights_per_channel(&self) -> usize {
        self.stages.iter().map(|s| s.k_h * s.k_w).sum()
    }
}

/// An extent is admissible when it factors entirely over {2, 3, 4, 5}
/// (equivalently: 1 or 5-smooth).
pub fn is_admissible(mut n: usize) -> bool {
    for f in [2, 3, 5] {
        while n % f == 0 {
            n /= f;
        }
    }
    n == 1
}

/// Smallest admissible integer >= `n`.
fn pad_up(n: usize) -> usize {
    (n..).find(|&m| is_admissible(m)).expect("admissible integers are unbounded")
}

/// Factor an admissible extent largest-first, folding one pair of 2s into a
/// leading 4 as long as at least two stages remain. This reproduces the stack
/// 4x2x2x2 for 32 while keeping the two-stage 2x2 split for 4.
fn factor(n: usize) -> Vec<usize> {
    debug_assert!(is_admissible(n));
    let mut m = n;
    let mut count = |f: usize| {
        let mut c = 0;
        while m % f == 0 {
            m /= f;
            c += 1;
        }
        c
    };
    let fives = count(5);
    let threes = count(3);
    let mut twos = count(2);
    let mut factors = Vec::new();
    factors.extend(std::iter::repeat_n(5, fives));
    if twos >= 2 && fives + threes + twos - 1 >= 2 {
        factors.push(4);
        twos -= 2;
    }
    factors.extend(std::iter::repeat_n(3, threes));
    factors.extend(std::iter::repeat_n(2, twos));
    factors
}

/// Plan the kernel stack for an image of height `h` and width `w`. Each
/// dimension is padded up to the nearest admissible extent and factored
/// largest-first; when the two dimensions need different stage counts, the
/// shorter factor list is extended with 1s.
pub fn plan_dwck(h: usize, w: usize) -> DwckPlan {
    assert!(h >= 1 && w >= 1, "plan_dwck requires positive dims");
    let ph = pad_up(h);
    let pw = pad_up(w);
    let fh = factor(ph);
    let fw = factor(pw);
    let len = fh.len().max(fw.len());
    let stages = (0..len)
        .map(|i| {
            let kh = fh.get(i).copied().unwrap_or(1);
            let kw = fw.get(i).copied().unwrap_or(1);
            Stage { k_h: kh, k_w: kw, s_h: kh, s_w: kw }
        })
        .collect();
    DwckPlan { pad_to: (ph, pw), stages }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stage(k_h: usize, k_w: usize) -> Stage {
        Stage { k_h, k_w, s_h: k_h, s_w: k_w }
    }

    #[test]
    fn plan_32_is_4_2_2_2() {
        let plan = plan_dwck(32, 32);
        assert_eq!(plan.pad_to, (32, 32));
        assert_eq!(plan.stages, vec![stage(4, 4), stage(2, 2), stage(2, 2), stage(2, 2)]);
    }

    #[test]
    fn plan_4_is_two_2x2_stages() {
        let plan = plan_dwck(4, 4);
        assert_eq!(plan.pad_to, (4, 4));
        assert_eq!(plan.stages, vec![stage(2, 2), stage(2, 2)]);
    }

    #[test]
    fn prime_31_pads_to_32() {
        // 31 is prime; exhaustive search confirms 32 is the nearest
        // admissible extent.
        assert!(!(31..32).any(is_admissible));
        assert!(is_admissible(32));
        let plan = plan_dwck(31, 31);
        assert_eq!(plan.pad_to, (32, 32));
        assert_eq!(plan.stages, plan_dwck(32, 32).stages);
    }

    #[test]
    fn rectangular_dims_pad_short_factor_list_with_ones() {
        let plan = plan_dwck(32, 8);
        assert_eq!(plan.pad_to, (32, 8));
        assert_eq!(plan.stages, vec![stage(4, 4), stage(2, 2), stage(2, 1), stage(2, 1)]);
    }

    #[test]
    fn degenerate_dim_gets_empty_factors() {
        let plan = plan_dwck(1, 1);
        assert_eq!(plan.pad_to, (1, 1));
        assert!(plan.stages.is_empty());

        let plan = plan_dwck(1, 4);
        assert_eq!(plan.stages, vec![stage(1, 2), stage(1, 2)]);
    }

    #[test]
    fn all_dims_up_to_64_compose_to_one() {
        for h in 1..=64usize {
            for w in 1..=64usize {
                let plan = plan_dwck(h, w);
                let (ph, pw) = plan.pad_to;
                assert!(ph >= h && pw >= w);
                // padding is minimal: brute-force nearest admissible integer
                assert!((h..ph).all(|m| !is_admissible(m)), "pad_to not minimal for {h}");
                assert!((w..pw).all(|m| !is_admissible(m)), "pad_to not minimal for {w}");
                // padding stays below the largest admissible factor
                assert!(ph - h <= 5 && pw - w <= 5, "pad gap too large at ({h}, {w})");
                let mut cur = (ph, pw);
                for s in &plan.stages {
                    assert_eq!((s.k_h, s.k_w), (s.s_h, s.s_w), "kernel must equal stride");
                    assert_eq!(cur.0 % s.k_h, 0);
                    assert_eq!(cur.1 % s.k_w, 0);
                    cur = (cur.0 / s.k_h, cur.1 / s.k_w);
                }
                assert_eq!(cur, (1, 1), "stages must compose to 1x1 for ({h}, {w})");
            }
        }
    }
}
