use std::collections::HashSet;

use thiserror::Error;

use super::{
    is_identifier, Axis, BinOp, Dim3, Inst, IrError, KernelDef, Operand, Reg, SpecialKind,
    SpecialReg, Stmt, Word,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseErrorKind {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("unresolved label `{0}`")]
    UnresolvedLabel(String),
    #[error("duplicate label `{0}`")]
    DuplicateLabel(String),
    #[error("invalid kernel: {0}")]
    Invalid(IrError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}, column {column}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub column: usize,
    pub kind: ParseErrorKind,
}

#[derive(Debug, Clone, Copy)]
struct Token<'a> {
    text: &'a str,
    column: usize,
}

/// Splits a comment-stripped line on whitespace and commas, keeping 1-based
/// columns.
fn tokenize(line: &str) -> Vec<Token<'_>> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        let sep = c.is_whitespace() || c == ',';
        match (sep, start) {
            (true, Some(s)) => {
                out.push(Token {
                    text: &line[s..i],
                    column: s + 1,
                });
                start = None;
            }
            (false, None) => start = Some(i),
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Token {
            text: &line[s..],
            column: s + 1,
        });
    }
    out
}

struct LineCtx {
    line: usize,
    end_column: usize,
}

impl LineCtx {
    fn err(&self, column: usize, kind: ParseErrorKind) -> ParseError {
        ParseError {
            line: self.line,
            column,
            kind,
        }
    }

    fn syntax(&self, column: usize, msg: impl Into<String>) -> ParseError {
        self.err(column, ParseErrorKind::Syntax(msg.into()))
    }
}

struct Operands<'t, 'a> {
    toks: &'t [Token<'a>],
    pos: usize,
    ctx: &'t LineCtx,
    opcode: &'t str,
}

impl<'t, 'a> Operands<'t, 'a> {
    fn next(&mut self, what: &str) -> Result<Token<'a>, ParseError> {
        let t = self.toks.get(self.pos).copied().ok_or_else(|| {
            self.ctx.syntax(
                self.ctx.end_column,
                format!("{}: missing {what} operand", self.opcode),
            )
        })?;
        self.pos += 1;
        Ok(t)
    }

    fn finish(&self) -> Result<(), ParseError> {
        match self.toks.get(self.pos) {
            Some(t) => Err(self.ctx.syntax(
                t.column,
                format!("{}: unexpected operand `{}`", self.opcode, t.text),
            )),
            None => Ok(()),
        }
    }

    fn reg(&mut self) -> Result<Reg, ParseError> {
        let t = self.next("register")?;
        parse_reg(t.text).ok_or_else(|| {
            self.ctx
                .syntax(t.column, format!("expected register, found `{}`", t.text))
        })
    }

    fn operand(&mut self, params: &[String]) -> Result<Operand, ParseError> {
        let t = self.next("source")?;
        if let Some(r) = parse_reg(t.text) {
            return Ok(Operand::Reg(r));
        }
        if let Some(name) = t.text.strip_prefix('$') {
            return params
                .iter()
                .position(|p| p == name)
                .map(Operand::Param)
                .ok_or_else(|| {
                    self.ctx
                        .syntax(t.column, format!("unknown parameter `{name}`"))
                });
        }
        parse_imm(t.text).map(Operand::Imm).ok_or_else(|| {
            self.ctx.syntax(
                t.column,
                format!("expected register, immediate or $param, found `{}`", t.text),
            )
        })
    }

    fn imm(&mut self) -> Result<Word, ParseError> {
        let t = self.next("immediate")?;
        parse_imm(t.text).ok_or_else(|| {
            self.ctx
                .syntax(t.column, format!("expected immediate, found `{}`", t.text))
        })
    }

    fn label(&mut self) -> Result<(String, usize), ParseError> {
        let t = self.next("label")?;
        if !is_identifier(t.text) {
            return Err(self
                .ctx
                .syntax(t.column, format!("invalid label `{}`", t.text)));
        }
        Ok((t.text.to_string(), t.column))
    }

    fn special(&mut self) -> Result<SpecialReg, ParseError> {
        let t = self.next("special register")?;
        parse_special(t.text).ok_or_else(|| {
            self.ctx.syntax(
                t.column,
                format!("expected special register (e.g. blockIdx.x), found `{}`", t.text),
            )
        })
    }
}

fn parse_reg(s: &str) -> Option<Reg> {
    let digits = s.strip_prefix('r')?;
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok().map(Reg)
}

fn parse_imm(s: &str) -> Option<Word> {
    let digits = s.strip_prefix('-').unwrap_or(s);
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    s.parse().ok()
}

fn parse_special(s: &str) -> Option<SpecialReg> {
    let (kind, axis) = s.split_once('.')?;
    let kind = SpecialKind::ALL.into_iter().find(|k| k.name() == kind)?;
    let axis = Axis::ALL.into_iter().find(|a| a.suffix() == axis)?;
    Some(SpecialReg { kind, axis })
}

fn parse_u32(ctx: &LineCtx, t: Token<'_>) -> Result<u32, ParseError> {
    t.text
        .parse()
        .map_err(|_| ctx.syntax(t.column, format!("expected non-negative integer, found `{}`", t.text)))
}

/// Parses the line-based kernel text format.
///
/// ```text
/// kernel vadd
/// grid 4 1 1
/// block 2 1 1
/// regs 4
/// param a
///       READ_SPECIAL r0 blockIdx.x
/// done: RET
/// ```
pub fn parse_kernel(text: &str) -> Result<KernelDef, ParseError> {
    let mut name: Option<String> = None;
    let mut grid = Dim3::linear(1);
    let mut block = Dim3::linear(1);
    let mut register_count = 0u16;
    let mut shared_words = 0u32;
    let mut params: Vec<String> = Vec::new();
    let mut inter_block_dependent = false;
    let mut body: Vec<Stmt> = Vec::new();
    // (line, column) of each body statement and of each label reference
    let mut stmt_pos: Vec<(usize, usize)> = Vec::new();
    let mut label_refs: Vec<(String, usize, usize)> = Vec::new();
    let mut labels: HashSet<String> = HashSet::new();
    let mut last_line = 0;

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        last_line = line_no;
        let content = raw.split('#').next().unwrap_or("");
        let toks = tokenize(content);
        if toks.is_empty() {
            continue;
        }
        let ctx = LineCtx {
            line: line_no,
            end_column: content.trim_end().len() + 1,
        };
        let head = toks[0];
        let header = match head.text {
            "kernel" | "grid" | "block" | "regs" | "shared" | "param" | "flag" => true,
            _ => false,
        };
        if header {
            if !body.is_empty() {
                return Err(ctx.syntax(head.column, "header lines must precede the body"));
            }
            let args = &toks[1..];
            let want = |n: usize| -> Result<(), ParseError> {
                if args.len() != n {
                    Err(ctx.syntax(
                        head.column,
                        format!("`{}` takes {n} argument(s), found {}", head.text, args.len()),
                    ))
                } else {
                    Ok(())
                }
            };
            match head.text {
                "kernel" => {
                    want(1)?;
                    if name.is_some() {
                        return Err(ctx.syntax(head.column, "duplicate `kernel` header"));
                    }
                    if !is_identifier(args[0].text) {
                        return Err(ctx.syntax(args[0].column, "invalid kernel name"));
                    }
                    name = Some(args[0].text.to_string());
                }
                "grid" | "block" => {
                    want(3)?;
                    let d = Dim3::new(
                        parse_u32(&ctx, args[0])?,
                        parse_u32(&ctx, args[1])?,
                        parse_u32(&ctx, args[2])?,
                    );
                    if !d.is_valid_extent() {
                        return Err(ctx.syntax(args[0].column, "extents must be >= 1"));
                    }
                    if head.text == "grid" {
                        grid = d;
                    } else {
                        block = d;
                    }
                }
                "regs" => {
                    want(1)?;
                    register_count = args[0].text.parse().map_err(|_| {
                        ctx.syntax(args[0].column, "expected register count")
                    })?;
                }
                "shared" => {
                    want(1)?;
                    shared_words = parse_u32(&ctx, args[0])?;
                }
                "param" => {
                    want(1)?;
                    let p = args[0].text;
                    if !is_identifier(p) {
                        return Err(ctx.syntax(args[0].column, "invalid parameter name"));
                    }
                    if params.iter().any(|q| q == p) {
                        return Err(ctx.syntax(args[0].column, format!("duplicate parameter `{p}`")));
                    }
                    params.push(p.to_string());
                }
                "flag" => {
                    want(1)?;
                    match args[0].text {
                        "inter_block_dependent" => inter_block_dependent = true,
                        other => {
                            return Err(ctx.syntax(args[0].column, format!("unknown flag `{other}`")))
                        }
                    }
                }
                _ => unreachable!(),
            }
            continue;
        }

        // body line: [label:] OPCODE operand*
        let mut rest = &toks[..];
        let mut label = None;
        if let Some(l) = head.text.strip_suffix(':') {
            if !is_identifier(l) {
                return Err(ctx.syntax(head.column, format!("invalid label `{l}`")));
            }
            if !labels.insert(l.to_string()) {
                return Err(ctx.err(head.column, ParseErrorKind::DuplicateLabel(l.to_string())));
            }
            label = Some(l.to_string());
            rest = &rest[1..];
        }
        let Some(op_tok) = rest.first().copied() else {
            return Err(ctx.syntax(ctx.end_column, "label must be followed by an instruction"));
        };
        let mut ops = Operands {
            toks: &rest[1..],
            pos: 0,
            ctx: &ctx,
            opcode: op_tok.text,
        };
        let inst = match op_tok.text {
            "CONST" => Inst::Const {
                dst: ops.reg()?,
                imm: ops.imm()?,
            },
            "MOV" => Inst::Mov {
                dst: ops.reg()?,
                src: ops.operand(&params)?,
            },
            "READ_SPECIAL" => Inst::ReadSpecial {
                dst: ops.reg()?,
                reg: ops.special()?,
            },
            "LOAD_GLOBAL" => Inst::LoadGlobal {
                dst: ops.reg()?,
                addr: ops.operand(&params)?,
            },
            "STORE_GLOBAL" => Inst::StoreGlobal {
                addr: ops.operand(&params)?,
                value: ops.operand(&params)?,
            },
            "ATOMIC_ADD_GLOBAL" => Inst::AtomicAddGlobal {
                dst: ops.reg()?,
                addr: ops.operand(&params)?,
                value: ops.operand(&params)?,
            },
            "LOAD_SHARED" => Inst::LoadShared {
                dst: ops.reg()?,
                addr: ops.operand(&params)?,
            },
            "STORE_SHARED" => Inst::StoreShared {
                addr: ops.operand(&params)?,
                value: ops.operand(&params)?,
            },
            "BAR_SYNC" => Inst::BarSync,
            "BRANCH" => {
                let cond = ops.reg()?;
                let (target, col) = ops.label()?;
                label_refs.push((target.clone(), line_no, col));
                Inst::Branch { cond, target }
            }
            "JUMP" => {
                let (target, col) = ops.label()?;
                label_refs.push((target.clone(), line_no, col));
                Inst::Jump { target }
            }
            "RET" => Inst::Ret,
            other => match BinOp::ALL.into_iter().find(|b| b.mnemonic() == other) {
                Some(op) => Inst::Bin {
                    op,
                    dst: ops.reg()?,
                    a: ops.operand(&params)?,
                    b: ops.operand(&params)?,
                },
                None => {
                    return Err(ctx.err(op_tok.column, ParseErrorKind::UnknownOpcode(other.to_string())))
                }
            },
        };
        ops.finish()?;
        stmt_pos.push((line_no, op_tok.column));
        body.push(Stmt { label, inst });
    }

    for (target, line, column) in label_refs {
        if !labels.contains(&target) {
            return Err(ParseError {
                line,
                column,
                kind: ParseErrorKind::UnresolvedLabel(target),
            });
        }
    }

    let name = name.ok_or(ParseError {
        line: 1,
        column: 1,
        kind: ParseErrorKind::Syntax("missing `kernel <name>` header".into()),
    })?;
    let kernel = KernelDef {
        name,
        params,
        grid,
        block,
        register_count,
        shared_words,
        body,
        inter_block_dependent,
    };
    kernel.validate().map_err(|e| {
        let (line, column) = match &e {
            IrError::RegisterOutOfRange { index, .. } | IrError::ParamOutOfRange { index, .. } => {
                stmt_pos[*index]
            }
            IrError::FallsOffEnd => stmt_pos.last().copied().unwrap_or((last_line, 1)),
            _ => (last_line.max(1), 1),
        };
        ParseError {
            line,
            column,
            kind: ParseErrorKind::Invalid(e),
        }
    })?;
    Ok(kernel)
}
