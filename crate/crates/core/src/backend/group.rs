//! Layer groups: chains of local-capable ops run slice by slice out of LMEM.

use std::collections::{HashMap, HashSet};
use std::ops::Range;

use super::lmem::{align_up, backward_slice, hull, lmem_size, split_even};
use crate::error::{Error, Result};
use crate::ir::{
    AttrMapExt, Attribute, ChipConfig, LayerGroupInfo, ModuleIR, ModuleState, OpKind, Opcode, Operation, ValueId,
};

/// Longest chain considered for one group.
const MAX_GROUP_OPS: usize = 8;

/// Rows of `v` that `op` reads to produce its output rows `out`.
pub fn operand_rows(m: &ModuleIR, op: &Operation, out: Range<usize>) -> Result<Range<usize>> {
    backward_slice(m, op, out)
}

/// Non-weight operands of `op` that live in LMEM during a group step, with
/// their position.
fn lmem_operands(op: &Operation, weights: &HashSet<ValueId>) -> Vec<(usize, ValueId)> {
    op.operands
        .iter()
        .copied()
        .enumerate()
        .filter(|(i, v)| !v.is_none() && !weights.contains(v) && !(op.kind() == OpKind::Conv && *i > 0))
        .collect()
}

fn eligible(m: &ModuleIR, op: &Operation, weights: &HashSet<ValueId>) -> bool {
    if !op.opcode.is_local_capable() {
        return false;
    }
    let y = m.ty(op.result());
    if y.rank() != 4 {
        return false;
    }
    if op.kind() == OpKind::Conv && op.operands[1..].iter().any(|v| !v.is_none() && !weights.contains(v)) {
        return false;
    }
    for (_, v) in lmem_operands(op, weights) {
        let t = m.ty(v);
        if t.rank() != 4 || t.shape[0] != y.shape[0] {
            return false;
        }
        if !matches!(op.kind(), OpKind::Conv | OpKind::MaxPool | OpKind::AvgPool) && t.shape != y.shape {
            return false;
        }
    }
    true
}

/// Rows of every LMEM value of a candidate group at one H step, derived
/// backwards from the rows of the group output.
fn derive_rows(
    m: &ModuleIR,
    body: &[&Operation],
    weights: &HashSet<ValueId>,
    out: ValueId,
    rows: Range<usize>,
) -> Result<HashMap<ValueId, Range<usize>>> {
    let mut need: HashMap<ValueId, Range<usize>> = HashMap::new();
    need.insert(out, rows);
    for op in body.iter().rev() {
        let Some(r) = need.get(&op.result()).cloned() else {
            return Err(Error::EmptySlice);
        };
        for (_, v) in lmem_operands(op, weights) {
            let inr = operand_rows(m, op, r.clone())?;
            let e = need.entry(v).or_insert(inr.clone());
            *e = hull(e, &inr);
        }
    }
    Ok(need)
}

struct Plan {
    nsecs: usize,
    hsecs: usize,
    inputs: Vec<ValueId>,
    /// Per value: rows at each H step.
    rows: HashMap<ValueId, Vec<Range<usize>>>,
    /// Per value: LMEM (addr, size).
    alloc: HashMap<ValueId, (u64, u64)>,
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn try_plan(
    m: &ModuleIR,
    body: &[&Operation],
    weights: &HashSet<ValueId>,
    chip: &ChipConfig,
    nsecs: usize,
    hsecs: usize,
) -> Option<Plan> {
    let out = body.last()?.result();
    let oshape = &m.ty(out).shape;
    let nmax = oshape[0].div_ceil(nsecs);
    let mut rows: HashMap<ValueId, Vec<Range<usize>>> = HashMap::new();
    for r in split_even(oshape[2], hsecs) {
        let step = derive_rows(m, body, weights, out, r).ok()?;
        for (v, r) in step {
            rows.entry(v).or_default().push(r);
        }
    }
    let produced: HashSet<ValueId> = body.iter().map(|op| op.result()).collect();
    let mut inputs = Vec::new();
    for op in body {
        for (_, v) in lmem_operands(op, weights) {
            if !produced.contains(&v) && !inputs.contains(&v) {
                inputs.push(v);
            }
        }
    }
    if inputs.is_empty() {
        return None;
    }
    let order: Vec<ValueId> = inputs
        .iter()
        .copied()
        .chain(body.iter().map(|op| op.result()))
        .collect();
    let mut alloc = HashMap::new();
    let mut at = 0u64;
    for v in order {
        let ty = m.ty(v);
        let hmax = rows[&v].iter().map(|r| r.len()).max()?;
        let size = lmem_size(&[nmax, ty.shape[1], hmax, ty.shape[3]], ty.dtype, chip, true);
        alloc.insert(v, (at, size));
        at = align_up(at + size, chip.eu_bytes);
        if at > chip.lmem_bytes {
            return None;
        }
    }
    Some(Plan {
        nsecs,
        hsecs,
        inputs,
        rows,
        alloc,
    })
}

/// The cheapest slicing (fewest steps, then fewest N sections) that fits.
fn best_plan(m: &ModuleIR, body: &[&Operation], weights: &HashSet<ValueId>, chip: &ChipConfig) -> Option<Plan> {
    let oshape = &m.ty(body.last()?.result()).shape;
    let mut pairs: Vec<(usize, usize)> = divisors(oshape[0])
        .into_iter()
        .flat_map(|n| (1..=oshape[2]).map(move |h| (n, h)))
        .collect();
    pairs.sort_by_key(|(n, h)| (n * h, *n));
    pairs
        .into_iter()
        .find_map(|(n, h)| try_plan(m, body, weights, chip, n, h))
}

/// Exactly one value of the candidate escapes and it is the last result.
fn single_exit(m: &ModuleIR, body: &[&Operation], uses_outside: &dyn Fn(ValueId) -> bool) -> bool {
    let last = body.last().unwrap().result();
    body.iter().all(|op| uses_outside(op.result()) == (op.result() == last)) && m.ty(last).rank() == 4
}

/// Wraps maximal feasible runs of local-capable ops into `tpu.Group`s.
pub fn layer_group(m: &ModuleIR, chip: &ChipConfig) -> Result<ModuleIR> {
    if m.state != ModuleState::TpuLowered {
        return Err(Error::WrongState {
            expected: "TPU_LOWERED".into(),
            found: m.state.to_string(),
        });
    }
    if m.ops.iter().any(|op| op.kind() == OpKind::Group) {
        return Err(Error::WrongState {
            expected: "ungrouped module".into(),
            found: "module already has groups".into(),
        });
    }
    let weights: HashSet<ValueId> = m.weight_values().into_iter().collect();
    let outputs: HashSet<ValueId> = m.outputs.iter().copied().collect();
    let ops = &m.ops;
    let mut out_ops = Vec::new();
    let mut i = 0;
    while i < ops.len() {
        if !eligible(m, &ops[i], &weights) {
            out_ops.push(ops[i].clone());
            i += 1;
            continue;
        }
        let mut best: Option<(usize, Plan)> = None;
        for j in i..ops.len().min(i + MAX_GROUP_OPS) {
            if !eligible(m, &ops[j], &weights) {
                break;
            }
            let inside: HashSet<usize> = (i..=j).collect();
            let uses_outside = |v: ValueId| {
                outputs.contains(&v)
                    || ops
                        .iter()
                        .enumerate()
                        .any(|(k, op)| !inside.contains(&k) && op.operands.contains(&v))
            };
            let body: Vec<&Operation> = ops[i..=j].iter().collect();
            if !single_exit(m, &body, &uses_outside) {
                continue;
            }
            if let Some(plan) = best_plan(m, &body, &weights, chip) {
                best = Some((j, plan));
            }
        }
        match best {
            Some((j, plan)) => {
                out_ops.push(make_group(m, &ops[i..=j], &plan));
                i = j + 1;
            }
            None => {
                out_ops.push(ops[i].clone());
                i += 1;
            }
        }
    }
    let mut out = m.clone();
    out.ops = out_ops;
    crate::ir::verify_module(&out)?;
    Ok(out)
}

fn ranges_attr(rs: &[Range<usize>]) -> (Vec<i64>, Vec<i64>) {
    (
        rs.iter().map(|r| r.start as i64).collect(),
        rs.iter().map(|r| r.len() as i64).collect(),
    )
}

fn make_group(m: &ModuleIR, ops: &[Operation], plan: &Plan) -> Operation {
    let out = ops.last().unwrap().result();
    let (n_idx, n_slice) = ranges_attr(&split_even(m.ty(out).shape[0], plan.nsecs));
    let mut body = Vec::with_capacity(ops.len() + 1);
    for op in ops {
        let v = op.result();
        let (h_idx, h_slice) = ranges_attr(&plan.rows[&v]);
        let (addr, size) = plan.alloc[&v];
        let info = LayerGroupInfo {
            out_addr: addr as i64,
            out_size: size as i64,
            buffer_addr: 0,
            buffer_size: 0,
            eu_align: true,
            h_idx,
            h_slice,
            n_idx: n_idx.clone(),
            n_slice: n_slice.clone(),
        };
        body.push(op.clone().with_attr("group_info", Attribute::LayerGroup(info)));
    }
    body.push(Operation::new(Opcode::tpu(OpKind::Yield), vec![out], vec![]));
    let mut g = Operation::new(Opcode::tpu(OpKind::Group), plan.inputs.clone(), vec![out])
        .with_attr("nsecs", Attribute::Int(plan.nsecs as i64))
        .with_attr("hsecs", Attribute::Int(plan.hsecs as i64))
        .with_attr(
            "in_addr",
            Attribute::IntArray(plan.inputs.iter().map(|v| plan.alloc[v].0 as i64).collect()),
        )
        .with_attr(
            "in_size",
            Attribute::IntArray(plan.inputs.iter().map(|v| plan.alloc[v].1 as i64).collect()),
        );
    g.region = Some(body);
    g
}

/// Execution schedule of an emitted group, read back from its attributes.
#[derive(Debug, Clone)]
pub struct GroupSchedule {
    pub nsecs: usize,
    pub hsecs: usize,
    pub n_ranges: Vec<Range<usize>>,
    /// Rows of each LMEM value at each H step.
    pub rows: HashMap<ValueId, Vec<Range<usize>>>,
    /// LMEM placement of each LMEM value: (addr, size, eu_align).
    pub place: HashMap<ValueId, (u64, u64, bool)>,
    /// Group operands (group inputs), in order.
    pub inputs: Vec<ValueId>,
    pub output: ValueId,
}

fn as_ranges(idx: &[i64], len: &[i64]) -> Vec<Range<usize>> {
    idx.iter()
        .zip(len)
        .map(|(a, l)| *a as usize..(*a + *l) as usize)
        .collect()
}

/// Rebuilds the schedule of `group`: body ranges come straight from the
/// attributes, group-input ranges are the hull of what their consumers read.
pub fn group_schedule(m: &ModuleIR, group: &Operation) -> Result<GroupSchedule> {
    let bad = |why: &str| Error::codegen(format!("group: {why}"));
    let body = group.region.as_ref().ok_or_else(|| bad("no region"))?;
    let nsecs = group.attrs.int("nsecs").ok_or_else(|| bad("missing nsecs"))? as usize;
    let hsecs = group.attrs.int("hsecs").ok_or_else(|| bad("missing hsecs"))? as usize;
    let in_addr = group.attrs.ints("in_addr").ok_or_else(|| bad("missing in_addr"))?;
    let in_size = group.attrs.ints("in_size").ok_or_else(|| bad("missing in_size"))?;
    if in_addr.len() != group.operands.len() || in_size.len() != group.operands.len() {
        return Err(bad("input placement arrays disagree with operands"));
    }
    let weights: HashSet<ValueId> = m.weight_values().into_iter().collect();
    let mut rows = HashMap::new();
    let mut place = HashMap::new();
    let mut n_ranges = None;
    let compute: Vec<&Operation> = body.iter().filter(|op| op.kind() != OpKind::Yield).collect();
    for op in &compute {
        let info = op.attrs.group_info().ok_or_else(|| bad("body op without group_info"))?;
        if info.h_idx.len() != hsecs || info.h_slice.len() != hsecs || info.n_idx.len() != nsecs {
            return Err(bad("slice arrays disagree with hsecs/nsecs"));
        }
        rows.insert(op.result(), as_ranges(&info.h_idx, &info.h_slice));
        place.insert(op.result(), (info.out_addr as u64, info.out_size as u64, info.eu_align));
        n_ranges.get_or_insert_with(|| as_ranges(&info.n_idx, &info.n_slice));
    }
    for (k, &v) in group.operands.iter().enumerate() {
        let mut per_step: Vec<Option<Range<usize>>> = vec![None; hsecs];
        for op in &compute {
            for (_, u) in lmem_operands(op, &weights) {
                if u != v {
                    continue;
                }
                for (s, r) in rows[&op.result()].iter().enumerate() {
                    let need = operand_rows(m, op, r.clone())?;
                    per_step[s] = Some(per_step[s].as_ref().map_or(need.clone(), |p| hull(p, &need)));
                }
            }
        }
        let steps: Option<Vec<_>> = per_step.into_iter().collect();
        rows.insert(v, steps.ok_or_else(|| bad("group input never read"))?);
        place.insert(v, (in_addr[k] as u64, in_size[k] as u64, true));
    }
    Ok(GroupSchedule {
        nsecs,
        hsecs,
        n_ranges: n_ranges.ok_or_else(|| bad("empty body"))?,
        rows,
        place,
        inputs: group.operands.clone(),
        output: group.results[0],
    })
}

/// Operands of `op` read from LMEM inside a group.
pub fn group_lmem_operands(m: &ModuleIR, op: &Operation) -> Vec<(usize, ValueId)> {
    let weights: HashSet<ValueId> = m.weight_values().into_iter().collect();
    lmem_operands(op, &weights)
}

/// One failed check of the group auditor.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditFinding {
    pub group: usize,
    pub what: String,
}

/// Re-checks every emitted group from its attributes alone: slices tile the
/// output, every consumer's rows lie inside its operand's buffer, each LMEM
/// allocation fits and no two allocations overlap, and the recorded sizes
/// cover the largest slice.
pub fn audit_groups(m: &ModuleIR, chip: &ChipConfig) -> Vec<AuditFinding> {
    let mut out = Vec::new();
    for (gi, g) in m.ops.iter().filter(|op| op.kind() == OpKind::Group).enumerate() {
        let mut fail = |what: String| out.push(AuditFinding { group: gi, what });
        let s = match group_schedule(m, g) {
            Ok(s) => s,
            Err(e) => {
                fail(e.to_string());
                continue;
            }
        };
        let oshape = m.ty(s.output).shape.clone();
        // output tiling
        let tiles = |rs: &[Range<usize>], len: usize| {
            rs.first().map(|r| r.start) == Some(0)
                && rs.last().map(|r| r.end) == Some(len)
                && rs.windows(2).all(|w| w[0].end == w[1].start)
                && rs.iter().all(|r| !r.is_empty())
        };
        if !tiles(&s.rows[&s.output], oshape[2]) {
            fail(format!(
                "h slices {:?} do not tile {} rows",
                s.rows[&s.output], oshape[2]
            ));
        }
        if !tiles(&s.n_ranges, oshape[0]) {
            fail(format!("n slices {:?} do not tile batch {}", s.n_ranges, oshape[0]));
        }
        // containment of every read
        for op in g
            .region
            .as_ref()
            .unwrap()
            .iter()
            .filter(|op| op.kind() != OpKind::Yield)
        {
            for (_, v) in group_lmem_operands(m, op) {
                for (k, r) in s.rows[&op.result()].iter().enumerate() {
                    match backward_slice(m, op, r.clone()) {
                        Ok(need) if s.rows[&v][k].start <= need.start && need.end <= s.rows[&v][k].end => {}
                        Ok(need) => fail(format!(
                            "step {k}: `{}` reads rows {need:?} of `{}` but buffer holds {:?}",
                            m.name_of(op.result()),
                            m.name_of(v),
                            s.rows[&v][k]
                        )),
                        Err(e) => fail(format!("step {k}: {e}")),
                    }
                }
            }
        }
        // footprint
        let nmax = s.n_ranges.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut spans: Vec<(u64, u64, ValueId)> = Vec::new();
        for (&v, &(addr, size, eu)) in &s.place {
            let ty = m.ty(v);
            let hmax = s.rows[&v].iter().map(|r| r.len()).max().unwrap_or(0);
            let need = lmem_size(&[nmax, ty.shape[1], hmax, ty.shape[3]], ty.dtype, chip, eu);
            if size < need {
                fail(format!(
                    "`{}` holds {size} bytes, largest slice needs {need}",
                    m.name_of(v)
                ));
            }
            if addr + size > chip.lmem_bytes {
                fail(format!(
                    "`{}` ends at {} past lmem {}",
                    m.name_of(v),
                    addr + size,
                    chip.lmem_bytes
                ));
            }
            spans.push((addr, addr + size, v));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                fail(format!("`{}` overlaps `{}`", m.name_of(w[0].2), m.name_of(w[1].2)));
            }
        }
        let total: u64 = spans.iter().map(|s| s.1 - s.0).sum();
        if total > chip.lmem_bytes {
            fail(format!("live allocations {total} exceed lmem {}", chip.lmem_bytes));
        }
    }
    out
}
