//! Canonical `.tmir` text form.
//!
//! ```text
//! tmir 1
//! module "Sample"
//! weight_file "conv2d_weight.npz"
//! state TOP_F32
//! inputs (%0)
//! outputs (%3)
//! %0 = top.Input() : tensor<1x32x100x100xf32> loc("input")
//! %1 = top.Weight() : tensor<65x32x3x3xf32> loc("filter_conv1")
//! %2 = top.Weight() : tensor<65xf32> loc("bias_conv1")
//! %3 = top.Conv(%0, %1, %2) {kernel_shape = [3, 3], ...} : tensor<1x65x50x50xf32> loc("conv1")
//! end
//! ```
//!
//! Value ids are renumbered in definition order on output, so two modules
//! print the same text iff they are structurally equal after
//! [`ModuleIR::compact`].

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor_store::DType;

use super::attr::{AttrMap, Attribute, LayerGroupInfo};
use super::module::{ModuleIR, ModuleState, Operation};
use super::opcode::{OpKind, Opcode};
use super::types::{PerAxisQuant, QuantAnnotation, TensorType, UniformQuant, ValueId};
use super::verify::verify_module;

const MAGIC: &str = "tmir 1";

pub fn serialize_module(m: &ModuleIR) -> String {
    let mut m = m.clone();
    m.compact();
    let mut out = String::new();
    let _ = writeln!(out, "{MAGIC}");
    let _ = writeln!(out, "module {}", quote(&m.name));
    let _ = writeln!(out, "weight_file {}", quote(&m.weight_file));
    let _ = writeln!(out, "state {}", m.state);
    if let Some(chip) = &m.chip {
        let _ = writeln!(out, "chip {}", quote(chip));
    }
    if let Some(mode) = m.mode {
        let _ = writeln!(out, "mode {mode}");
    }
    if m.asymmetric {
        let _ = writeln!(out, "asymmetric true");
    }
    let _ = writeln!(out, "inputs ({})", id_list(&m.inputs));
    let _ = writeln!(out, "outputs ({})", id_list(&m.outputs));
    print_block(&m, &m.ops, 0, &mut out);
    out.push_str("end\n");
    out
}

fn id_list(ids: &[ValueId]) -> String {
    ids.iter()
        .map(|v| {
            if v.is_none() {
                "none".to_string()
            } else {
                format!("%{}", v.0)
            }
        })
        .collect::<Vec<_>>()
        .join(", ")
}

fn print_block(m: &ModuleIR, ops: &[Operation], depth: usize, out: &mut String) {
    let indent = "  ".repeat(depth);
    for op in ops {
        out.push_str(&indent);
        if !op.results.is_empty() {
            let _ = write!(out, "{} = ", id_list(&op.results));
        }
        let _ = write!(out, "{}({})", op.opcode, id_list(&op.operands));
        if !op.attrs.is_empty() {
            let _ = write!(out, " {}", fmt_attrs(&op.attrs));
        }
        match op.kind() {
            OpKind::Group => {
                out.push_str(" ({\n");
                print_block(m, op.region.as_deref().unwrap_or(&[]), depth + 1, out);
                let _ = writeln!(out, "{indent}}})");
            }
            OpKind::Yield => out.push('\n'),
            _ => {
                let r = op.result();
                let _ = writeln!(out, " : {} loc({})", fmt_type(&m.value(r).ty), quote(m.name_of(r)));
            }
        }
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c => out.push(c),
        }
    }
    out.push('"');
    out
}

fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

pub fn fmt_attrs(attrs: &AttrMap) -> String {
    let body = attrs
        .iter()
        .map(|(k, v)| format!("{k} = {}", fmt_attr(v)))
        .collect::<Vec<_>>()
        .join(", ");
    format!("{{{body}}}")
}

fn fmt_ints(v: &[i64]) -> String {
    format!("[{}]", v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", "))
}

fn fmt_attr(a: &Attribute) -> String {
    match a {
        Attribute::Int(v) => v.to_string(),
        Attribute::Float(v) => fmt_f64(*v),
        Attribute::Bool(v) => v.to_string(),
        Attribute::Str(s) => quote(s),
        Attribute::IntArray(v) => fmt_ints(v),
        Attribute::LayerGroup(g) => format!(
            "#tpu.lg<out_addr = {}, out_size = {}, buffer_addr = {}, buffer_size = {}, eu_align = {}, h_idx = {}, h_slice = {}, n_idx = {}, n_slice = {}>",
            g.out_addr,
            g.out_size,
            g.buffer_addr,
            g.buffer_size,
            g.eu_align,
            fmt_ints(&g.h_idx),
            fmt_ints(&g.h_slice),
            fmt_ints(&g.n_idx),
            fmt_ints(&g.n_slice)
        ),
    }
}

/// `tensor<1x16x100x100x!quant.calibrated<f32<-4.178:4.493>>>` style.
pub fn fmt_type(ty: &TensorType) -> String {
    let mut s = String::from("tensor<");
    for d in &ty.shape {
        let _ = write!(s, "{d}x");
    }
    s.push_str(&fmt_elem(ty));
    if let Some(addr) = ty.address {
        let _ = write!(s, ", {addr}:i64");
    }
    s.push('>');
    s
}

fn fmt_elem(ty: &TensorType) -> String {
    match &ty.quant {
        QuantAnnotation::None => ty.dtype.to_string(),
        QuantAnnotation::Calibrated { min, max } => {
            format!("!quant.calibrated<{}<{}:{}>>", ty.dtype, fmt_f64(*min), fmt_f64(*max))
        }
        QuantAnnotation::Uniform(u) => format!(
            "!quant.uniform<{}<{}:{}>:{}, {}:{}>",
            u.storage,
            u.qmin,
            u.qmax,
            u.expressed,
            fmt_f64(u.scale),
            u.zero_point
        ),
        QuantAnnotation::UniformPerAxis(p) => {
            let pairs = p
                .scales
                .iter()
                .zip(&p.zero_points)
                .map(|(s, z)| format!("{}:{z}", fmt_f64(*s)))
                .collect::<Vec<_>>()
                .join(",");
            format!(
                "!quant.uniform<{}<{}:{}>:{}:{}, {{{pairs}}}>",
                p.storage, p.qmin, p.qmax, p.expressed, p.axis
            )
        }
    }
}

pub fn parse_module(text: &str) -> Result<ModuleIR> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with("//"))
        .collect();
    let mut p = Parser {
        lines,
        pos: 0,
        line: 0,
        ids: HashMap::new(),
    };
    let m = p.module()?;
    verify_module(&m)?;
    Ok(m)
}

struct Parser<'a> {
    lines: Vec<(usize, &'a str)>,
    pos: usize,
    /// Line number reported by errors: the line being parsed.
    line: usize,
    ids: HashMap<String, ValueId>,
}

impl<'a> Parser<'a> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line,
            reason: reason.into(),
        }
    }

    fn next_line(&mut self) -> Result<(usize, &'a str)> {
        let l = self
            .lines
            .get(self.pos)
            .copied()
            .ok_or_else(|| self.err("unexpected end of file"))?;
        self.line = l.0;
        self.pos += 1;
        Ok(l)
    }

    fn keyed(&mut self, key: &str) -> Result<Option<&'a str>> {
        let next = self.lines.get(self.pos).copied();
        if let Some((n, _)) = next {
            self.line = n;
        }
        match next {
            Some((_, l)) if l.split_whitespace().next() == Some(key) => {
                self.pos += 1;
                Ok(Some(l[key.len()..].trim()))
            }
            _ => Ok(None),
        }
    }

    fn required(&mut self, key: &str) -> Result<&'a str> {
        self.keyed(key)?.ok_or_else(|| self.err(format!("expected `{key}`")))
    }

    fn module(&mut self) -> Result<ModuleIR> {
        let (_, magic) = self.next_line()?;
        if magic != MAGIC {
            return Err(self.err("missing `tmir 1` header"));
        }
        let name = self.string_line("module")?;
        let weight_file = self.string_line("weight_file")?;
        let state: ModuleState = self.required("state")?.parse().map_err(|e: String| self.err(e))?;
        let mut m = ModuleIR::new(name, weight_file);
        m.state = state;
        if let Some(chip) = self.keyed("chip")? {
            m.chip = Some(Cur::new(chip).string().map_err(|e| self.err(e))?);
        }
        if let Some(mode) = self.keyed("mode")? {
            m.mode = Some(mode.parse().map_err(|e: String| self.err(e))?);
        }
        if let Some(a) = self.keyed("asymmetric")? {
            m.asymmetric = a == "true";
        }
        let inputs = self.required("inputs")?;
        let outputs = self.required("outputs")?;

        m.ops = self.block(&mut m, false)?;
        m.inputs = self.resolve_list(inputs)?;
        m.outputs = self.resolve_list(outputs)?;
        Ok(m)
    }

    fn string_line(&mut self, key: &str) -> Result<String> {
        let rest = self.required(key)?;
        Cur::new(rest).string().map_err(|e| self.err(e))
    }

    fn resolve_list(&self, text: &str) -> Result<Vec<ValueId>> {
        let mut c = Cur::new(text);
        let names = c.paren_ids().map_err(|e| self.err(e))?;
        names.iter().map(|n| self.lookup(n)).collect()
    }

    fn lookup(&self, token: &str) -> Result<ValueId> {
        if token == "none" {
            return Ok(ValueId::NONE);
        }
        self.ids
            .get(token)
            .copied()
            .ok_or_else(|| self.err(format!("undefined value {token}")))
    }

    fn block(&mut self, m: &mut ModuleIR, nested: bool) -> Result<Vec<Operation>> {
        let mut ops = Vec::new();
        loop {
            let (n, line) = *self
                .lines
                .get(self.pos)
                .ok_or_else(|| self.err("unexpected end of file"))?;
            self.line = n;
            if !nested && line == "end" {
                self.pos += 1;
                return Ok(ops);
            }
            if nested && line == "})" {
                self.pos += 1;
                return Ok(ops);
            }
            ops.push(self.op(m)?);
        }
    }

    fn op(&mut self, m: &mut ModuleIR) -> Result<Operation> {
        let (_, line) = self.next_line()?;
        self.pos -= 1;
        let mut c = Cur::new(line);
        let results = if c.peek() == Some('%') {
            let r = c.id_list_until('=').map_err(|e| self.err(e))?;
            c.expect("=").map_err(|e| self.err(e))?;
            r
        } else {
            Vec::new()
        };
        let opname = c.ident();
        let opcode = Opcode::parse(&opname).ok_or_else(|| self.err(format!("unknown op `{opname}`")))?;
        let operand_tokens = c.paren_ids().map_err(|e| self.err(e))?;
        let operands = operand_tokens
            .iter()
            .map(|t| self.lookup(t))
            .collect::<Result<Vec<_>>>()?;
        c.ws();
        let attrs = if c.peek() == Some('{') {
            c.attrs().map_err(|e| self.err(e))?
        } else {
            AttrMap::new()
        };
        self.pos += 1;

        match opcode.kind {
            OpKind::Group => {
                c.expect("({").map_err(|e| self.err(e))?;
                let at = self.line;
                let body = self.block(m, true)?;
                self.line = at;
                let results = results.iter().map(|t| self.lookup(t)).collect::<Result<Vec<_>>>()?;
                let mut op = Operation::new(opcode, operands, results);
                op.attrs = attrs;
                op.region = Some(body);
                Ok(op)
            }
            OpKind::Yield => {
                let mut op = Operation::new(opcode, operands, Vec::new());
                op.attrs = attrs;
                Ok(op)
            }
            _ => {
                c.expect(":").map_err(|e| self.err(e))?;
                let ty = c.tensor_type().map_err(|e| self.err(e))?;
                c.expect("loc(").map_err(|e| self.err(e))?;
                let name = c.string().map_err(|e| self.err(e))?;
                c.expect(")").map_err(|e| self.err(e))?;
                if results.len() != 1 {
                    return Err(self.err("expected exactly one result"));
                }
                if self.ids.contains_key(&results[0]) {
                    return Err(self.err(format!("{} redefined", results[0])));
                }
                let id = m.add_value(name, ty);
                self.ids.insert(results[0].clone(), id);
                let mut op = Operation::new(opcode, operands, vec![id]);
                op.attrs = attrs;
                Ok(op)
            }
        }
    }
}

/// Character cursor over one line.
struct Cur<'a> {
    s: &'a str,
    pos: usize,
}

type CResult<T> = std::result::Result<T, String>;

impl<'a> Cur<'a> {
    fn new(s: &'a str) -> Self {
        Cur { s, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.s[self.pos..]
    }

    fn ws(&mut self) {
        while self.rest().starts_with(char::is_whitespace) {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.ws();
        self.rest().chars().next()
    }

    fn eat(&mut self, tok: &str) -> bool {
        self.ws();
        if self.rest().starts_with(tok) {
            self.pos += tok.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, tok: &str) -> CResult<()> {
        if self.eat(tok) {
            Ok(())
        } else {
            Err(format!("expected `{tok}` near `{}`", self.rest()))
        }
    }

    fn ident(&mut self) -> String {
        self.ws();
        let start = self.pos;
        while let Some(c) = self.rest().chars().next() {
            if c.is_ascii_alphanumeric() || c == '_' || c == '.' {
                self.pos += c.len_utf8();
            } else {
                break;
            }
        }
        self.s[start..self.pos].to_string()
    }

    fn id_token(&mut self) -> CResult<String> {
        self.ws();
        if self.eat("none") {
            return Ok("none".into());
        }
        if !self.eat("%") {
            return Err(format!("expected value id near `{}`", self.rest()));
        }
        let start = self.pos;
        while self.rest().starts_with(|c: char| c.is_ascii_digit()) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err("empty value id".into());
        }
        Ok(format!("%{}", &self.s[start..self.pos]))
    }

    fn id_list_until(&mut self, end: char) -> CResult<Vec<String>> {
        let mut out = vec![self.id_token()?];
        while self.peek() != Some(end) {
            self.expect(",")?;
            out.push(self.id_token()?);
        }
        Ok(out)
    }

    fn paren_ids(&mut self) -> CResult<Vec<String>> {
        self.expect("(")?;
        if self.eat(")") {
            return Ok(Vec::new());
        }
        let out = self.id_list_until(')')?;
        self.expect(")")?;
        Ok(out)
    }

    fn string(&mut self) -> CResult<String> {
        self.ws();
        if !self.eat("\"") {
            return Err(format!("expected string near `{}`", self.rest()));
        }
        let mut out = String::new();
        let mut chars = self.rest().char_indices();
        while let Some((i, c)) = chars.next() {
            match c {
                '"' => {
                    self.pos += i + 1;
                    return Ok(out);
                }
                '\\' => match chars.next() {
                    Some((_, 'n')) => out.push('\n'),
                    Some((_, e)) => out.push(e),
                    None => break,
                },
                c => out.push(c),
            }
        }
        Err("unterminated string".into())
    }

    fn number_text(&mut self) -> &'a str {
        self.ws();
        let start = self.pos;
        let bytes = self.s.as_bytes();
        while self.pos < bytes.len() {
            let c = bytes[self.pos] as char;
            let sign_ok = (c == '-' || c == '+') && (self.pos == start || matches!(bytes[self.pos - 1], b'e' | b'E'));
            if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || sign_ok {
                self.pos += 1;
            } else if self.pos == start || (self.pos == start + 1 && bytes[start] == b'-') {
                // inf / NaN
                if self.rest().starts_with("inf") {
                    self.pos += 3;
                } else if self.rest().starts_with("NaN") {
                    self.pos += 3;
                }
                break;
            } else {
                break;
            }
        }
        &self.s[start..self.pos]
    }

    fn int(&mut self) -> CResult<i64> {
        let t = self.number_text();
        t.parse().map_err(|_| format!("bad integer `{t}`"))
    }

    fn float(&mut self) -> CResult<f64> {
        let t = self.number_text();
        t.parse().map_err(|_| format!("bad float `{t}`"))
    }

    fn ints(&mut self) -> CResult<Vec<i64>> {
        self.expect("[")?;
        let mut out = Vec::new();
        if self.eat("]") {
            return Ok(out);
        }
        loop {
            out.push(self.int()?);
            if self.eat("]") {
                return Ok(out);
            }
            self.expect(",")?;
        }
    }

    fn attrs(&mut self) -> CResult<AttrMap> {
        self.expect("{")?;
        let mut out = AttrMap::new();
        if self.eat("}") {
            return Ok(out);
        }
        loop {
            let key = self.ident();
            if key.is_empty() {
                return Err("expected attribute name".into());
            }
            self.expect("=")?;
            let value = self.attr_value()?;
            out.insert(key, value);
            if self.eat("}") {
                return Ok(out);
            }
            self.expect(",")?;
        }
    }

    fn attr_value(&mut self) -> CResult<Attribute> {
        match self.peek() {
            Some('"') => Ok(Attribute::Str(self.string()?)),
            Some('[') => Ok(Attribute::IntArray(self.ints()?)),
            Some('#') => self.layer_group(),
            Some('t') if self.eat("true") => Ok(Attribute::Bool(true)),
            Some('f') if self.eat("false") => Ok(Attribute::Bool(false)),
            _ => {
                let t = self.number_text();
                if t.is_empty() {
                    return Err(format!("bad attribute value near `{}`", self.rest()));
                }
                if t.contains(['.', 'e', 'E', 'i', 'N']) {
                    t.parse().map(Attribute::Float).map_err(|_| format!("bad float `{t}`"))
                } else {
                    t.parse().map(Attribute::Int).map_err(|_| format!("bad integer `{t}`"))
                }
            }
        }
    }

    fn layer_group(&mut self) -> CResult<Attribute> {
        self.expect("#tpu.lg<")?;
        let mut g = LayerGroupInfo::default();
        loop {
            let key = self.ident();
            self.expect("=")?;
            match key.as_str() {
                "out_addr" => g.out_addr = self.int()?,
                "out_size" => g.out_size = self.int()?,
                "buffer_addr" => g.buffer_addr = self.int()?,
                "buffer_size" => g.buffer_size = self.int()?,
                "eu_align" => {
                    g.eu_align = if self.eat("true") {
                        true
                    } else if self.eat("false") {
                        false
                    } else {
                        return Err("bad eu_align".into());
                    }
                }
                "h_idx" => g.h_idx = self.ints()?,
                "h_slice" => g.h_slice = self.ints()?,
                "n_idx" => g.n_idx = self.ints()?,
                "n_slice" => g.n_slice = self.ints()?,
                other => return Err(format!("unknown layer-group field `{other}`")),
            }
            if self.eat(">") {
                return Ok(Attribute::LayerGroup(g));
            }
            self.expect(",")?;
        }
    }

    fn dtype(&mut self) -> CResult<DType> {
        let t = self.ident();
        t.parse()
    }

    fn tensor_type(&mut self) -> CResult<TensorType> {
        self.expect("tensor<")?;
        let mut shape = Vec::new();
        while self.rest().starts_with(|c: char| c.is_ascii_digit()) {
            let start = self.pos;
            while self.rest().starts_with(|c: char| c.is_ascii_digit()) {
                self.pos += 1;
            }
            shape.push(self.s[start..self.pos].parse().map_err(|_| "bad dim")?);
            if !self.rest().starts_with('x') {
                return Err("expected `x` after dimension".into());
            }
            self.pos += 1;
        }
        let (dtype, quant) = if self.rest().starts_with("!quant.calibrated<") {
            self.pos += "!quant.calibrated<".len();
            let expressed = self.dtype()?;
            self.expect("<")?;
            let min = self.float()?;
            self.expect(":")?;
            let max = self.float()?;
            self.expect(">>")?;
            (expressed, QuantAnnotation::Calibrated { min, max })
        } else if self.rest().starts_with("!quant.uniform<") {
            self.pos += "!quant.uniform<".len();
            let storage = self.dtype()?;
            self.expect("<")?;
            let qmin = self.int()? as i32;
            self.expect(":")?;
            let qmax = self.int()? as i32;
            self.expect(">:")?;
            let expressed = self.dtype()?;
            if self.eat(":") {
                let axis = self.int()? as usize;
                self.expect(",")?;
                self.expect("{")?;
                let mut scales = Vec::new();
                let mut zero_points = Vec::new();
                loop {
                    scales.push(self.float()?);
                    self.expect(":")?;
                    zero_points.push(self.int()? as i32);
                    if self.eat("}") {
                        break;
                    }
                    self.expect(",")?;
                }
                self.expect(">")?;
                (
                    storage,
                    QuantAnnotation::UniformPerAxis(PerAxisQuant {
                        scales,
                        zero_points,
                        axis,
                        qmin,
                        qmax,
                        storage,
                        expressed,
                    }),
                )
            } else {
                self.expect(",")?;
                let scale = self.float()?;
                self.expect(":")?;
                let zero_point = self.int()? as i32;
                self.expect(">")?;
                (
                    storage,
                    QuantAnnotation::Uniform(UniformQuant {
                        scale,
                        zero_point,
                        qmin,
                        qmax,
                        storage,
                        expressed,
                    }),
                )
            }
        } else {
            (self.dtype()?, QuantAnnotation::None)
        };
        let address = if self.eat(",") {
            let a = self.int()?;
            self.expect(":i64")?;
            Some(a as u64)
        } else {
            None
        };
        self.expect(">")?;
        Ok(TensorType {
            shape,
            dtype,
            quant,
            address,
        })
    }
}
