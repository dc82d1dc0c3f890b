//! Direction families and the coefficients that write a symmetric matrix near the
//! identity as a positive combination of rank-one matrices k^perp (x) k^perp.
//!
//! Directions are stored as integer numerators over 5, so every algebraic
//! statement about the families can be checked exactly.

use num_rational::Rational64;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("the rank-one matrices of a direction family are linearly dependent")]
    SingularSystem,
    #[error("matrix at sup-entry distance {distance} from the identity exceeds the radius {radius}")]
    OutsideBall { distance: f64, radius: f64 },
}

/// Common denominator of every direction coordinate.
pub const DENOMINATOR: i64 = 5;

/// Fraction of the exact positivity radius that is used as the working radius.
pub const RADIUS_SAFETY: f64 = 0.95;

/// One representative of each +/- pair, as numerators over [`DENOMINATOR`].
const FIRST: [[i64; 2]; 3] = [[5, 0], [3, 4], [3, -4]];
const SECOND: [[i64; 2]; 3] = [[0, 5], [4, 3], [-4, 3]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Family {
    First,
    Second,
}

impl Family {
    /// Odd cutoff indices use the first family, even ones the second.
    pub fn for_index(j: i64) -> Self {
        if j.rem_euclid(2) == 1 {
            Family::First
        } else {
            Family::Second
        }
    }

    fn numerators(self) -> [[i64; 2]; 3] {
        match self {
            Family::First => FIRST,
            Family::Second => SECOND,
        }
    }

    /// Pair representatives as unit vectors.
    pub fn representatives(self) -> [[f64; 2]; 3] {
        self.numerators().map(|k| [k[0] as f64 / 5.0, k[1] as f64 / 5.0])
    }

    /// All six directions, each representative followed by its negative.
    pub fn directions(self) -> [[f64; 2]; 6] {
        let r = self.representatives();
        [r[0], [-r[0][0], -r[0][1]], r[1], [-r[1][0], -r[1][1]], r[2], [-r[2][0], -r[2][1]]]
    }

    fn all_numerators(self) -> Vec<[i64; 2]> {
        self.numerators().iter().flat_map(|&k| [k, [-k[0], -k[1]]]).collect()
    }
}

/// Symmetric 2x2 matrix stored as (r11, r12, r22).
pub type Sym2 = [f64; 3];

/// Rows of the 3x3 system: entries of k^perp (x) k^perp = (k2^2, -k1 k2, k1^2) over 25.
fn system(family: Family) -> [[Rational64; 3]; 3] {
    let d2 = DENOMINATOR * DENOMINATOR;
    let ks = family.numerators();
    let mut a = [[Rational64::from_integer(0); 3]; 3];
    for (col, k) in ks.iter().enumerate() {
        a[0][col] = Rational64::new(k[1] * k[1], d2);
        a[1][col] = Rational64::new(-k[0] * k[1], d2);
        a[2][col] = Rational64::new(k[0] * k[0], d2);
    }
    a
}

fn invert(a: [[Rational64; 3]; 3]) -> Result<[[Rational64; 3]; 3], GeometryError> {
    let zero = Rational64::from_integer(0);
    let mut m = a;
    let mut inv = [[zero; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        row[i] = Rational64::from_integer(1);
    }
    for col in 0..3 {
        let pivot = (col..3).find(|&r| m[r][col] != zero).ok_or(GeometryError::SingularSystem)?;
        m.swap(col, pivot);
        inv.swap(col, pivot);
        let p = m[col][col];
        for j in 0..3 {
            m[col][j] /= p;
            inv[col][j] /= p;
        }
        for r in 0..3 {
            if r != col {
                let f = m[r][col];
                for j in 0..3 {
                    let (mc, ic) = (m[col][j], inv[col][j]);
                    m[r][j] -= f * mc;
                    inv[r][j] -= f * ic;
                }
            }
        }
    }
    Ok(inv)
}

fn to_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

#[derive(Debug, Clone)]
struct Solver {
    exact: [[Rational64; 3]; 3],
    float: [[f64; 3]; 3],
}

impl Solver {
    fn new(family: Family) -> Result<Self, GeometryError> {
        let exact = invert(system(family))?;
        Ok(Self { exact, float: exact.map(|row| row.map(to_f64)) })
    }

    fn apply(&self, r: Sym2) -> [f64; 3] {
        std::array::from_fn(|i| (0..3).map(|j| self.float[i][j] * r[j]).sum())
    }
}

/// Both direction families with their coefficient solvers and working radius.
#[derive(Debug, Clone)]
pub struct DirectionSystem {
    solvers: [Solver; 2],
    radius_exact: Rational64,
    eps_gamma: f64,
}

fn slot(family: Family) -> usize {
    match family {
        Family::First => 0,
        Family::Second => 1,
    }
}

impl DirectionSystem {
    pub fn build() -> Result<Self, GeometryError> {
        let solvers = [Solver::new(Family::First)?, Solver::new(Family::Second)?];
        // c_k(Id + E) >= c_k(Id) - |E|_sup * |row_k|_1, and the bound is attained at a corner.
        let mut radius: Option<Rational64> = None;
        for s in &solvers {
            for row in &s.exact {
                let at_id = row[0] + row[2];
                let l1: Rational64 = row.iter().map(|x| if *x < Rational64::from_integer(0) { -x } else { *x }).sum();
                let r = at_id / l1;
                radius = Some(radius.map_or(r, |cur| cur.min(r)));
            }
        }
        let radius_exact = radius.expect("three coefficients per family");
        Ok(Self { solvers, radius_exact, eps_gamma: RADIUS_SAFETY * to_f64(radius_exact) })
    }

    /// Working radius of the matrix ball around the identity.
    pub fn eps_gamma(&self) -> f64 {
        self.eps_gamma
    }

    /// Radius at which the smallest coefficient first reaches zero.
    pub fn positivity_radius(&self) -> Rational64 {
        self.radius_exact
    }

    /// Exact coefficients of a rational symmetric matrix.
    pub fn coefficients_exact(&self, family: Family, r: [Rational64; 3]) -> [Rational64; 3] {
        let inv = &self.solvers[slot(family)].exact;
        std::array::from_fn(|i| inv[i][0] * r[0] + inv[i][1] * r[1] + inv[i][2] * r[2])
    }

    /// Coefficients c_k(R) for the three pair representatives, without a radius check.
    pub fn coefficients_unchecked(&self, family: Family, r: Sym2) -> [f64; 3] {
        self.solvers[slot(family)].apply(r)
    }

    /// gamma_k(R) = c_k(R)^(1/2) for the three pair representatives (gamma_{-k} = gamma_k).
    pub fn gamma(&self, family: Family, r: Sym2) -> Result<[f64; 3], GeometryError> {
        let distance = (r[0] - 1.0).abs().max(r[1].abs()).max((r[2] - 1.0).abs());
        if distance > self.eps_gamma {
            return Err(GeometryError::OutsideBall { distance, radius: self.eps_gamma });
        }
        Ok(self.coefficients_unchecked(family, r).map(f64::sqrt))
    }

    /// Largest gamma_k over the working ball; coefficients are affine, so corners suffice.
    pub fn sup_gamma(&self) -> f64 {
        let e = self.eps_gamma;
        let mut best = 0.0f64;
        for family in [Family::First, Family::Second] {
            for s0 in [-1.0, 1.0] {
                for s1 in [-1.0, 1.0] {
                    for s2 in [-1.0, 1.0] {
                        let c = self.coefficients_unchecked(family, [1.0 + s0 * e, s1 * e, 1.0 + s2 * e]);
                        best = c.iter().fold(best, |b, &x| b.max(x.sqrt()));
                    }
                }
            }
        }
        best
    }

    /// Reconstruct (1/2) sum over all six directions of gamma_k^2 k^perp (x) k^perp.
    pub fn reconstruct(family: Family, gamma: [f64; 3]) -> Sym2 {
        let mut r = [0.0; 3];
        for (k, g) in family.representatives().iter().zip(gamma) {
            let c = g * g;
            r[0] += c * k[1] * k[1];
            r[1] -= c * k[0] * k[1];
            r[2] += c * k[0] * k[0];
        }
        r
    }
}

/// Outcome of one exact structural check on the direction families.
#[derive(Debug, Clone, Serialize)]
pub struct StructureCheck {
    pub name: &'static str,
    pub holds: bool,
}

/// Exhaustive exact checks: lattice membership and unit length, closure under
/// negation, disjointness, and |k + k'| >= 1/2 within a family unless k' = -k.
pub fn verify_structure() -> Vec<StructureCheck> {
    let d2 = DENOMINATOR * DENOMINATOR;
    let fams = [Family::First.all_numerators(), Family::Second.all_numerators()];
    let unit = fams.iter().flatten().all(|k| k[0] * k[0] + k[1] * k[1] == d2);
    let symmetric = fams.iter().all(|f| f.iter().all(|k| f.contains(&[-k[0], -k[1]])));
    let disjoint = fams[0].iter().all(|k| !fams[1].contains(k));
    let separated = fams.iter().all(|f| {
        f.iter().all(|a| {
            f.iter().all(|b| {
                let s = [a[0] + b[0], a[1] + b[1]];
                s == [0, 0] || 4 * (s[0] * s[0] + s[1] * s[1]) >= d2
            })
        })
    });
    vec![
        StructureCheck { name: "5k is an integer unit-length vector", holds: unit },
        StructureCheck { name: "families are closed under negation", holds: symmetric },
        StructureCheck { name: "families are disjoint", holds: disjoint },
        StructureCheck { name: "|k + k'| >= 1/2 unless k' = -k", holds: separated },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn q(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    #[test]
    fn identity_coefficients_exact() {
        let sys = DirectionSystem::build().unwrap();
        let one = q(1, 1);
        let zero = q(0, 1);
        // c_(1,0) = r22 - 9 r11 / 16, c_(3/5,+-4/5) = 25 r11 / 32 -+ 25 r12 / 24
        let c = sys.coefficients_exact(Family::First, [one, zero, one]);
        assert_eq!(c, [q(7, 16), q(25, 32), q(25, 32)]);
        let r = [q(3, 2), q(1, 3), q(-2, 7)];
        let c = sys.coefficients_exact(Family::First, r);
        assert_eq!(c[0], r[2] - q(9, 16) * r[0]);
        assert_eq!(c[1], q(25, 32) * r[0] - q(25, 24) * r[1]);
        assert_eq!(c[2], q(25, 32) * r[0] + q(25, 24) * r[1]);
        // the second family is the first reflected across the diagonal
        let c2 = sys.coefficients_exact(Family::Second, [r[2], r[1], r[0]]);
        assert_eq!(c2, c);
    }

    #[test]
    fn radius_is_seven_twenty_fifths() {
        let sys = DirectionSystem::build().unwrap();
        assert_eq!(sys.positivity_radius(), q(7, 25));
        assert!((sys.eps_gamma() - 0.95 * 0.28).abs() < 1e-15);
        // c_(1,0) vanishes at the corner r11 = 1 + 7/25, r22 = 1 - 7/25
        let c = sys.coefficients_exact(Family::First, [q(32, 25), q(0, 1), q(18, 25)]);
        assert_eq!(c[0], q(0, 1));
    }

    #[test]
    fn structure() {
        assert!(verify_structure().iter().all(|c| c.holds));
        assert_eq!(Family::for_index(3), Family::First);
        assert_eq!(Family::for_index(-1), Family::First);
        assert_eq!(Family::for_index(0), Family::Second);
        let s = [5 + 3, 4];
        assert_eq!(s[0] * s[0] + s[1] * s[1], 80);
    }

    #[test]
    fn outside_ball() {
        let sys = DirectionSystem::build().unwrap();
        assert!(matches!(sys.gamma(Family::First, [1.3, 0.0, 1.0]), Err(GeometryError::OutsideBall { .. })));
        let g = sys.gamma(Family::First, [1.0, 0.0, 1.0]).unwrap();
        assert!((g[0] - (7.0f64 / 16.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sup_gamma_on_corner() {
        let sys = DirectionSystem::build().unwrap();
        let e = sys.eps_gamma();
        let expect = (25.0 * (1.0 + e) / 32.0 + 25.0 * e / 24.0).sqrt();
        assert!((sys.sup_gamma() - expect).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn reconstruction(u in -1.0f64..1.0, v in -1.0f64..1.0, w in -1.0f64..1.0, odd in any::<bool>()) {
            let sys = DirectionSystem::build().unwrap();
            let e = sys.eps_gamma();
            let r = [1.0 + e * u, e * v, 1.0 + e * w];
            let fam = if odd { Family::First } else { Family::Second };
            let g = sys.gamma(fam, r).unwrap();
            prop_assert!(g.iter().all(|&x| x > 0.0));
            let back = DirectionSystem::reconstruct(fam, g);
            for i in 0..3 {
                prop_assert!((back[i] - r[i]).abs() <= 1e-12);
            }
        }
    }
}
