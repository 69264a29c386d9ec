//! Tube masks and the nested student/teacher visible sets.
//!
//! A tube is one spatial cell of the token grid across every temporal slab.
//! The teacher's visible tubes are drawn first; the student's are a uniform
//! sub-sample of the teacher's, so the student's visible set is always
//! contained in the teacher's.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::TokenGrid;

/// Number of visible tubes at masking ratio `ratio`: `(1 − ratio)·tubes`, rounded half up.
pub fn visible_tube_count(grid: &TokenGrid, ratio: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Mask(format!("masking ratio {ratio} outside [0, 1)")));
    }
    let exact = (1.0 - ratio) * grid.num_tubes() as f64;
    // the small slack absorbs representation error in ratios such as 0.9
    let k = (exact + 0.5 + 1e-9).floor() as usize;
    if k == 0 {
        return Err(Error::Mask(format!(
            "masking ratio {ratio} leaves no visible tube out of {}",
            grid.num_tubes()
        )));
    }
    Ok(k.min(grid.num_tubes()))
}

/// Expand sorted tube ids into sorted token indices over every slab.
pub fn tubes_to_tokens(grid: &TokenGrid, tubes: &[usize]) -> Vec<usize> {
    let per_slab = grid.num_tubes();
    (0..grid.t)
        .flat_map(|t| tubes.iter().map(move |&s| t * per_slab + s))
        .collect()
}

fn sample_tubes<R: Rng + ?Sized>(rng: &mut R, population: usize, amount: usize) -> Vec<usize> {
    let mut picked = index::sample(rng, population, amount).into_vec();
    picked.sort_unstable();
    picked
}

/// Visible token indices of a random tube mask at ratio `ratio`.
pub fn sample_tube_mask<R: Rng + ?Sized>(grid: &TokenGrid, ratio: f64, rng: &mut R) -> Result<Vec<usize>> {
    let k = visible_tube_count(grid, ratio)?;
    let tubes = sample_tubes(rng, grid.num_tubes(), k);
    Ok(tubes_to_tokens(grid, &tubes))
}

/// Sorted set difference `superset \ subset`; fails unless `subset ⊆ superset`.
pub fn set_diff(superset: &[usize], subset: &[usize]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(superset.len().saturating_sub(subset.len()));
    let mut j = 0;
    for &x in superset {
        if j < subset.len() && subset[j] < x {
            return Err(Error::Mask(format!(
                "index {} is not contained in the superset",
                subset[j]
            )));
        }
        if j < subset.len() && subset[j] == x {
            j += 1;
        } else {
            out.push(x);
        }
    }
    if j < subset.len() {
        return Err(Error::Mask(format!(
            "index {} is not contained in the superset",
            subset[j]
        )));
    }
    Ok(out)
}

/// Checks that the two ratios give a usable nested pair on `grid`.
pub fn ratio_pair_violations(grid: &TokenGrid, r_stu: f64, r_tea: f64) -> Vec<String> {
    let mut out = Vec::new();
    if r_tea > r_stu {
        out.push(format!(
            "teacher masking ratio {r_tea} exceeds student ratio {r_stu}; the student's visible set must be nested in the teacher's"
        ));
    }
    let stu = visible_tube_count(grid, r_stu);
    let tea = visible_tube_count(grid, r_tea);
    for (name, r) in [("student", &stu), ("teacher", &tea)] {
        if let Err(e) = r {
            out.push(format!("{name}: {e}"));
        }
    }
    if let (Ok(s), Ok(t)) = (stu, tea) {
        if r_tea < r_stu && s >= t {
            out.push(format!(
                "ratios {r_stu} (student) and {r_tea} (teacher) both round to {s} visible tubes on a {}x{} grid; the strict subset relation cannot hold",
                grid.h, grid.w
            ));
        }
    }
    out
}

/// Nested visible sets of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPair {
    pub grid: TokenGrid,
    pub r_stu: f64,
    pub r_tea: f64,
    /// Sorted visible token indices seen by the teacher.
    pub teacher: Vec<usize>,
    /// Sorted visible token indices seen by the student; a subset of `teacher`.
    pub student: Vec<usize>,
    /// `teacher \ student`.
    pub diff: Vec<usize>,
}

impl MaskPair {
    /// Assemble a pair from explicit sets, computing the difference and checking every invariant.
    pub fn from_sets(
        grid: TokenGrid,
        r_stu: f64,
        r_tea: f64,
        teacher: Vec<usize>,
        student: Vec<usize>,
    ) -> Result<Self> {
        let diff = set_diff(&teacher, &student)?;
        let pair = MaskPair {
            grid,
            r_stu,
            r_tea,
            teacher,
            student,
            diff,
        };
        pair.validate()?;
        Ok(pair)
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.num_tokens()
    }

    /// Token indices the student does not see: the reconstruction targets.
    pub fn student_masked(&self) -> Vec<usize> {
        set_diff(&(0..self.num_tokens()).collect::<Vec<_>>(), &self.student)
            .expect("student set lies inside the grid")
    }

    /// Row positions, within the teacher's visible sequence, of each student token.
    pub fn student_rows_in_teacher(&self) -> Vec<usize> {
        rows_in(&self.teacher, &self.student)
    }

    /// Row positions, within the teacher's visible sequence, of each difference token.
    pub fn diff_rows_in_teacher(&self) -> Vec<usize> {
        rows_in(&self.teacher, &self.diff)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = &self.grid;
        let sorted = |v: &[usize]| v.windows(2).all(|w| w[0] < w[1]);
        for (name, set) in [("teacher", &self.teacher), ("student", &self.student), ("diff", &self.diff)] {
            if !sorted(set) {
                return Err(Error::Mask(format!("{name} set is not strictly increasing")));
            }
            if set.iter().any(|&i| i >= grid.num_tokens()) {
                return Err(Error::Mask(format!("{name} set has an index outside the grid")));
            }
        }
        let expected_diff = set_diff(&self.teacher, &self.student)?;
        if expected_diff != self.diff {
            return Err(Error::Mask("diff is not teacher minus student".into()));
        }
        let k_stu = visible_tube_count(grid, self.r_stu)?;
        let k_tea = visible_tube_count(grid, self.r_tea)?;
        if self.student.len() != k_stu * grid.t || self.teacher.len() != k_tea * grid.t {
            return Err(Error::Mask(format!(
                "cardinalities {} / {} do not match ratios {} / {}",
                self.student.len(),
                self.teacher.len(),
                self.r_stu,
                self.r_tea
            )));
        }
        if self.r_stu > self.r_tea && self.diff.is_empty() {
            return Err(Error::Mask("student set is not a strict subset of the teacher set".into()));
        }
        for (name, set) in [("teacher", &self.teacher), ("student", &self.student)] {
            if !is_tube_set(grid, set) {
                return Err(Error::Mask(format!("{name} set violates the tube property")));
            }
        }
        Ok(())
    }
}

fn rows_in(sorted_superset: &[usize], subset: &[usize]) -> Vec<usize> {
    subset
        .iter()
        .map(|x| {
            sorted_superset
                .binary_search(x)
                .expect("subset element missing from superset")
        })
        .collect()
}

/// True when every spatial position is visible in all slabs or in none.
pub fn is_tube_set(grid: &TokenGrid, tokens: &[usize]) -> bool {
    let mut counts = vec![0usize; grid.num_tubes()];
    for &i in tokens {
        counts[grid.tube_of(i)] += 1;
    }
    counts.iter().all(|&c| c == 0 || c == grid.t)
}

/// Teacher tubes first at `r_tea`, then the student's tubes sub-sampled from them at `r_stu`.
pub fn sample_asymmetric_pair<R: Rng + ?Sized>(
    grid: &TokenGrid,
    r_stu: f64,
    r_tea: f64,
    rng: &mut R,
) -> Result<MaskPair> {
    if r_tea > r_stu {
        return Err(Error::Mask(format!(
            "teacher masking ratio {r_tea} exceeds student ratio {r_stu}"
        )));
    }
    let k_tea = visible_tube_count(grid, r_tea)?;
    let k_stu = visible_tube_count(grid, r_stu)?;
    if r_tea < r_stu && k_stu >= k_tea {
        return Err(Error::Mask(ratio_pair_violations(grid, r_stu, r_tea).join("; ")));
    }
    let teacher_tubes = sample_tubes(rng, grid.num_tubes(), k_tea);
    let student_tubes = if k_stu == k_tea {
        teacher_tubes.clone()
    } else {
        let mut picked: Vec<usize> = index::sample(rng, k_tea, k_stu)
            .into_iter()
            .map(|i| teacher_tubes[i])
            .collect();
        picked.sort_unstable();
        picked
    };
    let teacher = tubes_to_tokens(grid, &teacher_tubes);
    let student = tubes_to_tokens(grid, &student_tubes);
    let diff = set_diff(&teacher, &student)?;
    Ok(MaskPair {
        grid: *grid,
        r_stu,
        r_tea,
        teacher,
        student,
        diff,
    })
}
