//! Stories of reflections: finite words over obstacle indices with no letter
//! repeated consecutively, their cyclic (primitive) classes and the
//! `J = r·I + l` decomposition.
//!
//! Letters are stored 0-based. The text form is dash-separated and 1-based,
//! so the word stored as `[0, 1, 0, 2]` prints as `1-2-1-3`.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

/// Default cap on the number of words an enumeration may produce.
pub const DEFAULT_ENUMERATION_BUDGET: u128 = 50_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SymbolicError {
    #[error("letters {0} repeat at position {1}")]
    RepeatedLetter(usize, usize),
    #[error("word is not cyclically admissible (first letter equals last)")]
    NotCyclic,
    #[error("enumeration budget exceeded: {count} words > budget {budget}")]
    BudgetExceeded { count: u128, budget: u128 },
    #[error("need N >= 2 obstacles and k >= 1, got N = {n}, k = {k}")]
    BadParameters { n: usize, k: usize },
    #[error("cannot parse story {0:?}")]
    Parse(String),
    #[error("word count overflows 128 bits")]
    Overflow,
}

/// An admissible word: adjacent letters differ.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Story(Vec<usize>);

impl Story {
    pub fn new(word: Vec<usize>) -> Result<Self, SymbolicError> {
        if let Some(i) = word.windows(2).position(|w| w[0] == w[1]) {
            return Err(SymbolicError::RepeatedLetter(word[i] + 1, i + 1));
        }
        Ok(Self(word))
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn letters(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Admissible when read around a circle: also last != first.
    pub fn is_cyclically_admissible(&self) -> bool {
        match (self.0.first(), self.0.last()) {
            (Some(a), Some(b)) => self.0.len() >= 2 && a != b,
            _ => false,
        }
    }

    /// `r` copies of `self` followed by its first `l` letters.
    pub fn repeat_with_prefix(&self, r: usize, l: usize) -> Story {
        let mut w = Vec::with_capacity(r * self.len() + l);
        for _ in 0..r {
            w.extend_from_slice(&self.0);
        }
        w.extend_from_slice(&self.0[..l]);
        Story(w)
    }

    pub fn reversed(&self) -> Story {
        Story(self.0.iter().rev().copied().collect())
    }

    pub fn max_letter(&self) -> Option<usize> {
        self.0.iter().copied().max()
    }
}

impl fmt::Display for Story {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|l| (l + 1).to_string()).collect();
        f.write_str(&parts.join("-"))
    }
}

impl FromStr for Story {
    type Err = SymbolicError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.is_empty() {
            return Ok(Story::empty());
        }
        let letters = s
            .split('-')
            .map(|p| match p.trim().parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(SymbolicError::Parse(s.to_string())),
            })
            .collect::<Result<Vec<_>, _>>()?;
        Story::new(letters)
    }
}

/// Smallest `p` dividing `n` such that the word is `p`-periodic.
fn smallest_divisor_period(w: &[usize]) -> usize {
    let n = w.len();
    (1..=n)
        .find(|&p| n.is_multiple_of(p) && (p..n).all(|i| w[i] == w[i - p]))
        .unwrap_or(n)
}

/// True iff the word is not a strict repetition of a shorter word.
///
/// With `cyclic` the word must be cyclically admissible.
pub fn is_primitive(word: &Story, cyclic: bool) -> Result<bool, SymbolicError> {
    if cyclic && !word.is_cyclically_admissible() {
        return Err(SymbolicError::NotCyclic);
    }
    Ok(smallest_divisor_period(word.letters()) == word.len())
}

/// Start index of the lexicographically least rotation (Booth).
pub fn least_rotation(w: &[usize]) -> usize {
    let n = w.len();
    if n == 0 {
        return 0;
    }
    let mut fail: Vec<isize> = vec![-1; 2 * n];
    let mut k: usize = 0;
    for j in 1..2 * n {
        let sj = w[j % n];
        let mut i = fail[j - k - 1];
        while i != -1 && sj != w[(k + i as usize + 1) % n] {
            if sj < w[(k + i as usize + 1) % n] {
                k = j - i as usize - 1;
            }
            i = fail[i as usize];
        }
        if i == -1 && sj != w[(k + i.wrapping_add(1) as usize) % n] {
            if sj < w[k % n] {
                k = j;
            }
            fail[j - k] = -1;
        } else {
            fail[j - k] = i + 1;
        }
    }
    k % n
}

/// A cyclically admissible primitive word in canonical (least-rotation) form.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PrimitiveStory(Story);

impl PrimitiveStory {
    /// Canonicalises any rotation of a primitive cyclic word.
    pub fn new(word: Story) -> Result<Self, SymbolicError> {
        if !is_primitive(&word, true)? {
            return Err(SymbolicError::Parse(format!("{word} is a repetition")));
        }
        let k = least_rotation(word.letters());
        let w = word.letters();
        let rotated: Vec<usize> = w[k..].iter().chain(&w[..k]).copied().collect();
        Ok(Self(Story(rotated)))
    }

    pub fn story(&self) -> &Story {
        &self.0
    }

    pub fn letters(&self) -> &[usize] {
        self.0.letters()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Canonical form of the same cycle read backwards.
    pub fn reversed(&self) -> PrimitiveStory {
        PrimitiveStory::new(self.0.reversed()).expect("reversal keeps primitivity")
    }

    pub fn is_self_reverse(&self) -> bool {
        self.reversed() == *self
    }
}

impl fmt::Display for PrimitiveStory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// `J = r·root + first l letters of root`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decomposition {
    /// The period word aligned with the start of `J` (not canonicalised).
    pub root: Story,
    pub repetitions: usize,
    pub remainder: usize,
}

impl Decomposition {
    pub fn reconstruct(&self) -> Story {
        self.root
            .repeat_with_prefix(self.repetitions, self.remainder)
    }

    /// The canonical primitive story of the root, when it is cyclic.
    pub fn primitive(&self) -> Option<PrimitiveStory> {
        PrimitiveStory::new(self.root.clone()).ok()
    }
}

/// Decomposes a story as `r` full periods of a cyclically admissible primitive
/// word followed by a proper prefix of it, with `r` maximal and ties broken by
/// the shortest root. Words of length ≤ 1 are their own root.
pub fn primitive_decompose(j: &Story) -> Decomposition {
    let w = j.letters();
    let n = w.len();
    if n <= 1 {
        return Decomposition {
            root: j.clone(),
            repetitions: n,
            remainder: 0,
        };
    }
    for p in 2..=n {
        let periodic = (p..n).all(|i| w[i] == w[i - p]);
        if periodic && w[p - 1] != w[0] {
            return Decomposition {
                root: Story(w[..p].to_vec()),
                repetitions: n / p,
                remainder: n % p,
            };
        }
    }
    unreachable!("p = n or n - 1 always qualifies for an admissible word")
}

/// `(β_k, |α_k|)`: admissible words of length exactly `k`, and of length at
/// most `k` counting the empty word.
pub fn count_admissible(n: usize, k: usize) -> Result<(u128, u128), SymbolicError> {
    if n < 2 {
        return Err(SymbolicError::BadParameters { n, k });
    }
    let n = n as u128;
    let mut beta = 0u128;
    let mut alpha = 1u128;
    for i in 1..=k {
        beta = if i == 1 {
            n
        } else {
            beta.checked_mul(n - 1).ok_or(SymbolicError::Overflow)?
        };
        alpha = alpha.checked_add(beta).ok_or(SymbolicError::Overflow)?;
    }
    Ok((beta, alpha))
}

/// Closed form `N((N-1)^k - 1)/(N-2) + 1` for `|α_k|`, valid for `N ≥ 3`.
pub fn alpha_closed_form(n: usize, k: usize) -> Option<u128> {
    if n < 3 {
        return None;
    }
    let n = n as u128;
    let pow = (n - 1).checked_pow(k as u32)?;
    Some(n * (pow - 1) / (n - 2) + 1)
}

/// Every admissible word of length `1..=k`, by length and then
/// lexicographically.
pub fn enumerate_admissible(n: usize, k: usize) -> Result<AdmissibleWords, SymbolicError> {
    enumerate_admissible_with_budget(n, k, DEFAULT_ENUMERATION_BUDGET)
}

pub fn enumerate_admissible_with_budget(
    n: usize,
    k: usize,
    budget: u128,
) -> Result<AdmissibleWords, SymbolicError> {
    if n < 2 || k < 1 {
        return Err(SymbolicError::BadParameters { n, k });
    }
    let count = match count_admissible(n, k) {
        Ok((_, alpha)) => alpha - 1,
        Err(_) => u128::MAX,
    };
    if count > budget {
        return Err(SymbolicError::BudgetExceeded { count, budget });
    }
    Ok(AdmissibleWords {
        n,
        max_len: k,
        current: None,
    })
}

/// Iterator behind [`enumerate_admissible`].
#[derive(Debug, Clone)]
pub struct AdmissibleWords {
    n: usize,
    max_len: usize,
    current: Option<Vec<usize>>,
}

/// Lexicographically least admissible word of length `len`.
fn first_word(len: usize) -> Vec<usize> {
    (0..len).map(|i| i % 2).collect()
}

/// Advances `w` to the next admissible word of the same length.
fn next_same_length(w: &mut [usize], n: usize) -> bool {
    let len = w.len();
    let mut pos = len;
    while pos > 0 {
        pos -= 1;
        let mut c = w[pos] + 1;
        if pos > 0 && c == w[pos - 1] {
            c += 1;
        }
        if c < n {
            w[pos] = c;
            for i in pos + 1..len {
                w[i] = if w[i - 1] == 0 { 1 } else { 0 };
            }
            return true;
        }
    }
    false
}

impl Iterator for AdmissibleWords {
    type Item = Story;

    fn next(&mut self) -> Option<Story> {
        match &mut self.current {
            None => {
                let w = first_word(1);
                self.current = Some(w.clone());
                Some(Story(w))
            }
            Some(w) => {
                if !next_same_length(w, self.n) {
                    let len = w.len() + 1;
                    if len > self.max_len {
                        return None;
                    }
                    *w = first_word(len);
                }
                Some(Story(w.clone()))
            }
        }
    }
}

/// Canonical primitive cyclic words of length `2..=k` over `n` letters, by
/// length and then lexicographically.
pub fn enumerate_primitive_cyclic(
    n: usize,
    k: usize,
) -> Result<Vec<PrimitiveStory>, SymbolicError> {
    if n < 2 {
        return Err(SymbolicError::BadParameters { n, k });
    }
    let mut out = Vec::new();
    for len in 2..=k {
        let mut w = first_word(len);
        loop {
            if w[len - 1] != w[0] && least_rotation(&w) == 0 && smallest_divisor_period(&w) == len {
                out.push(PrimitiveStory(Story(w.clone())));
            }
            if !next_same_length(&mut w, n) {
                break;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(text: &str) -> Story {
        text.parse().unwrap()
    }

    #[test]
    fn enumerate_examples() {
        let words: Vec<String> = enumerate_admissible(2, 3)
            .unwrap()
            .map(|w| w.to_string())
            .collect();
        assert_eq!(words, ["1", "2", "1-2", "2-1", "1-2-1", "2-1-2"]);
        assert_eq!(enumerate_admissible(3, 2).unwrap().count(), 9);
        assert_eq!(enumerate_admissible(3, 4).unwrap().count(), 45);
    }

    #[test]
    fn enumerate_order_and_admissibility() {
        let words: Vec<Story> = enumerate_admissible(4, 5).unwrap().collect();
        for pair in words.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert!(a.len() < b.len() || (a.len() == b.len() && a.letters() < b.letters()));
        }
        assert!(words
            .iter()
            .all(|w| w.letters().windows(2).all(|p| p[0] != p[1])));
    }

    #[test]
    fn budget_guard() {
        assert!(matches!(
            enumerate_admissible_with_budget(3, 30, 1_000_000),
            Err(SymbolicError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn count_examples() {
        assert_eq!(count_admissible(3, 3).unwrap(), (12, 22));
        assert_eq!(count_admissible(2, 5).unwrap().0, 2);
        assert_eq!(count_admissible(4, 1).unwrap(), (4, 5));
        assert_eq!(alpha_closed_form(3, 3), Some(22));
        for n in 3..=6 {
            for k in 1..=12 {
                assert_eq!(
                    alpha_closed_form(n, k).unwrap(),
                    count_admissible(n, k).unwrap().1
                );
            }
        }
    }

    #[test]
    fn primitivity_examples() {
        assert!(!is_primitive(&s("1-2-1-2"), true).unwrap());
        assert!(is_primitive(&s("1-2-3"), true).unwrap());
        assert!(is_primitive(&s("1-2-1-3"), true).unwrap());
        assert_eq!(
            is_primitive(&s("1-2-1"), true),
            Err(SymbolicError::NotCyclic)
        );
    }

    /// Brute force: every divisor period, every rotation.
    fn brute_primitive(w: &[usize]) -> bool {
        let n = w.len();
        !(1..n).any(|p| n.is_multiple_of(p) && (0..n).all(|i| w[i] == w[i % p]))
    }

    #[test]
    fn primitivity_exhaustive_small() {
        for w in enumerate_admissible(3, 8).unwrap() {
            if w.is_cyclically_admissible() {
                assert_eq!(
                    is_primitive(&w, true).unwrap(),
                    brute_primitive(w.letters()),
                    "{w}"
                );
            }
        }
    }

    #[test]
    fn decompose_examples() {
        let d = primitive_decompose(&s("1-2-1-2-1"));
        assert_eq!(
            (d.root.to_string(), d.repetitions, d.remainder),
            ("1-2".into(), 2, 1)
        );
        let d = primitive_decompose(&s("1-2-3-1-2-3"));
        assert_eq!(
            (d.root.to_string(), d.repetitions, d.remainder),
            ("1-2-3".into(), 2, 0)
        );
        let d = primitive_decompose(&s("1-2-1-2-1-3"));
        assert_eq!(d.reconstruct(), s("1-2-1-2-1-3"));
        assert_eq!(d, brute_decompose(&s("1-2-1-2-1-3")));
    }

    /// Oracle: try every cyclically admissible primitive root aligned with the
    /// start of the word and keep the one with the most repetitions.
    fn brute_decompose(j: &Story) -> Decomposition {
        let w = j.letters();
        let mut best: Option<Decomposition> = None;
        for p in 1..=w.len() {
            let root = Story(w[..p].to_vec());
            if !root.is_cyclically_admissible() || !brute_primitive(root.letters()) {
                continue;
            }
            let r = w.len() / p;
            let l = w.len() % p;
            if root.repeat_with_prefix(r, l) != *j {
                continue;
            }
            let better = match &best {
                None => true,
                Some(b) => r > b.repetitions,
            };
            if better {
                best = Some(Decomposition {
                    root,
                    repetitions: r,
                    remainder: l,
                });
            }
        }
        best.unwrap()
    }

    #[test]
    fn decompose_matches_brute_force() {
        for w in enumerate_admissible(3, 9).unwrap().filter(|w| w.len() >= 2) {
            assert_eq!(primitive_decompose(&w), brute_decompose(&w), "{w}");
        }
    }

    #[test]
    fn primitive_cyclic_counts() {
        let two = enumerate_primitive_cyclic(2, 6).unwrap();
        assert_eq!(two.len(), 1);
        let three: Vec<String> = enumerate_primitive_cyclic(3, 3)
            .unwrap()
            .iter()
            .map(|p| p.to_string())
            .collect();
        assert_eq!(three, ["1-2", "1-3", "2-3", "1-2-3", "1-3-2"]);
        // Möbius inversion of tr((J - I)^m) = (N-1)^m + (N-1)(-1)^m
        let n = 3usize;
        let all = enumerate_primitive_cyclic(n, 12).unwrap();
        for m in 2..=12usize {
            let mut total: i64 = 0;
            for d in 1..=m {
                if m % d == 0 {
                    let tr =
                        ((n - 1) as i64).pow(d as u32) + (n as i64 - 1) * (-1i64).pow(d as u32);
                    total += mobius(m / d) * tr;
                }
            }
            let expected = total / m as i64;
            let got = all.iter().filter(|p| p.len() == m).count() as i64;
            assert_eq!(got, expected, "length {m}");
        }
    }

    fn mobius(mut n: usize) -> i64 {
        let mut result = 1;
        let mut p = 2;
        while p * p <= n {
            if n.is_multiple_of(p) {
                n /= p;
                if n.is_multiple_of(p) {
                    return 0;
                }
                result = -result;
            }
            p += 1;
        }
        if n > 1 {
            result = -result;
        }
        result
    }

    #[test]
    fn display_and_parse() {
        let w = s("1-2-1-3");
        assert_eq!(w.letters(), &[0, 1, 0, 2]);
        assert_eq!(w.to_string(), "1-2-1-3");
        assert!("1-1".parse::<Story>().is_err());
        assert!("0-1".parse::<Story>().is_err());
        assert!("".parse::<Story>().unwrap().is_empty());
    }

    fn admissible_word(max_letter: usize, max_len: usize) -> impl Strategy<Value = Story> {
        prop::collection::vec(0..max_letter, 1..max_len).prop_map(move |raw| {
            let mut w: Vec<usize> = Vec::with_capacity(raw.len());
            for c in raw {
                let c = if w.last() == Some(&c) {
                    (c + 1) % max_letter
                } else {
                    c
                };
                w.push(c);
            }
            Story::new(w).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn decompose_reconstructs(w in admissible_word(4, 40)) {
            let d = primitive_decompose(&w);
            prop_assert_eq!(d.reconstruct(), w.clone());
            prop_assert!(d.remainder < d.root.len().max(1));
            if w.len() >= 2 {
                prop_assert!(d.root.is_cyclically_admissible());
                prop_assert!(is_primitive(&d.root, true).unwrap());
            }
        }

        #[test]
        fn canonical_rotation_is_rotation_invariant(w in admissible_word(4, 16), shift in 0usize..16) {
            prop_assume!(w.is_cyclically_admissible() && is_primitive(&w, true).unwrap());
            let n = w.len();
            let k = shift % n;
            let rotated: Vec<usize> = w.letters()[k..].iter().chain(&w.letters()[..k]).copied().collect();
            let a = PrimitiveStory::new(w.clone()).unwrap();
            let b = PrimitiveStory::new(Story::new(rotated).unwrap()).unwrap();
            prop_assert_eq!(&a, &b);
            let brute = (0..n)
                .map(|r| w.letters()[r..].iter().chain(&w.letters()[..r]).copied().collect::<Vec<_>>())
                .min()
                .unwrap();
            prop_assert_eq!(a.letters(), &brute[..]);
        }
    }
}
