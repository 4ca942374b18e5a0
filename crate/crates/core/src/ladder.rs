//! Instruction-list ladder programs and the PLC scan cycle.
//!
//! Source format: one `OPCODE OPERAND` per line, `#` starts a comment,
//! opcodes are case-insensitive. A rung opens with `LD`/`LDI`, continues
//! with any number of `AND`/`ANI`/`OR`/`ORI` contacts and closes with a
//! single `OUT`. Blank lines separate rungs; a blank line inside an
//! unfinished rung is an error.
//!
//! Contacts fold left to right into one accumulator, so
//! `LD X0 / AND X1 / OR X2` is `(X0 & X1) | X2`.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

pub const INPUT_COUNT: u8 = 8;
pub const OUTPUT_COUNT: u8 = 6;
pub const INTERNAL_COUNT: u8 = 16;

const OUTPUT_MASK: u8 = (1 << OUTPUT_COUNT) - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Operand {
    /// Input channel.
    X(u8),
    /// Output coil.
    Y(u8),
    /// Internal relay.
    M(u8),
}

impl Operand {
    fn checked(self) -> Result<Self, ParseErrorKind> {
        let (limit, index) = match self {
            Operand::X(i) => (INPUT_COUNT, i),
            Operand::Y(i) => (OUTPUT_COUNT, i),
            Operand::M(i) => (INTERNAL_COUNT, i),
        };
        if index < limit {
            Ok(self)
        } else {
            Err(ParseErrorKind::OperandOutOfRange(self.to_string()))
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::X(i) => write!(f, "X{i}"),
            Operand::Y(i) => write!(f, "Y{i}"),
            Operand::M(i) => write!(f, "M{i}"),
        }
    }
}

impl FromStr for Operand {
    type Err = ParseErrorKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ParseErrorKind::BadOperand(s.to_string());
        let mut chars = s.chars();
        let bank = chars.next().ok_or_else(bad)?;
        let digits = chars.as_str();
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(bad());
        }
        // Oversized indices still parse so they can be reported as out of range.
        let index = digits.parse::<u32>().map_err(|_| bad())?;
        let index = u8::try_from(index).unwrap_or(u8::MAX);
        let operand = match bank.to_ascii_uppercase() {
            'X' => Operand::X(index),
            'Y' => Operand::Y(index),
            'M' => Operand::M(index),
            _ => return Err(bad()),
        };
        operand.checked()
    }
}

/// Coil targets: outputs and internal relays. Inputs are not writable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Coil {
    Y(u8),
    M(u8),
}

impl From<Coil> for Operand {
    fn from(coil: Coil) -> Self {
        match coil {
            Coil::Y(i) => Operand::Y(i),
            Coil::M(i) => Operand::M(i),
        }
    }
}

impl fmt::Display for Coil {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        Operand::from(*self).fmt(f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Opcode {
    Ld,
    Ldi,
    And,
    Ani,
    Or,
    Ori,
    Out,
}

impl FromStr for Opcode {
    type Err = ParseErrorKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "LD" => Ok(Opcode::Ld),
            "LDI" => Ok(Opcode::Ldi),
            "AND" => Ok(Opcode::And),
            "ANI" => Ok(Opcode::Ani),
            "OR" => Ok(Opcode::Or),
            "ORI" => Ok(Opcode::Ori),
            "OUT" => Ok(Opcode::Out),
            _ => Err(ParseErrorKind::UnknownOpcode(s.to_string())),
        }
    }
}

impl fmt::Display for Opcode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Opcode::Ld => "LD",
            Opcode::Ldi => "LDI",
            Opcode::And => "AND",
            Opcode::Ani => "ANI",
            Opcode::Or => "OR",
            Opcode::Ori => "ORI",
            Opcode::Out => "OUT",
        })
    }
}

/// How a contact after the first combines with the accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum Combine {
    And,
    Or,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Contact {
    pub operand: Operand,
    /// Normally-closed contacts (`LDI`, `ANI`, `ORI`) pass when the bit is 0.
    pub negated: bool,
}

impl Contact {
    pub fn no(operand: Operand) -> Self {
        Contact {
            operand,
            negated: false,
        }
    }

    pub fn nc(operand: Operand) -> Self {
        Contact {
            operand,
            negated: true,
        }
    }
}

/// `first (op contact)* -> coil`
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Rung {
    pub first: Contact,
    pub rest: Vec<(Combine, Contact)>,
    pub coil: Coil,
}

impl Rung {
    /// Instruction-list rendering of the rung, one instruction per line.
    pub fn to_source(&self) -> String {
        let mut lines = vec![format!(
            "{} {}",
            if self.first.negated { "LDI" } else { "LD" },
            self.first.operand
        )];
        for (combine, contact) in &self.rest {
            let op = match (combine, contact.negated) {
                (Combine::And, false) => "AND",
                (Combine::And, true) => "ANI",
                (Combine::Or, false) => "OR",
                (Combine::Or, true) => "ORI",
            };
            lines.push(format!("{op} {}", contact.operand));
        }
        lines.push(format!("OUT {}", self.coil));
        lines.join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseErrorKind {
    #[error("unknown opcode `{0}`")]
    UnknownOpcode(String),
    #[error("malformed operand `{0}`")]
    BadOperand(String),
    #[error("operand {0} out of range")]
    OperandOutOfRange(String),
    #[error("{0} takes exactly one operand")]
    Arity(Opcode),
    #[error("OUT cannot target input {0}")]
    OutToInput(Operand),
    #[error("rung must start with LD or LDI, found {0}")]
    RungStart(Opcode),
    #[error("{0} is only valid as the first instruction of a rung")]
    LoadMidRung(Opcode),
    #[error("rung without OUT")]
    MissingOut,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {kind}")]
pub struct ParseError {
    pub line: usize,
    pub kind: ParseErrorKind,
}

/// Non-fatal diagnostic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Warning {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LadderProgram {
    rungs: Vec<Rung>,
    warnings: Vec<Warning>,
}

impl LadderProgram {
    /// Builds a program from rungs constructed in code; operand ranges are
    /// checked the same way the parser checks them.
    pub fn from_rungs(rungs: Vec<Rung>) -> Result<Self, ParseErrorKind> {
        for rung in &rungs {
            rung.first.operand.checked()?;
            for (_, contact) in &rung.rest {
                contact.operand.checked()?;
            }
            Operand::from(rung.coil).checked()?;
        }
        Ok(LadderProgram {
            rungs,
            warnings: Vec::new(),
        })
    }

    pub fn rungs(&self) -> &[Rung] {
        &self.rungs
    }

    pub fn warnings(&self) -> &[Warning] {
        &self.warnings
    }

    pub fn to_source(&self) -> String {
        self.rungs
            .iter()
            .map(Rung::to_source)
            .collect::<Vec<_>>()
            .join("\n\n")
    }
}

impl FromStr for LadderProgram {
    type Err = ParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_program(s)
    }
}

struct OpenRung {
    first: Contact,
    rest: Vec<(Combine, Contact)>,
    start_line: usize,
}

pub fn parse_program(text: &str) -> Result<LadderProgram, ParseError> {
    let mut rungs = Vec::new();
    let mut warnings = Vec::new();
    let mut coil_lines: Vec<(Coil, usize)> = Vec::new();
    let mut open: Option<OpenRung> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let err = |kind| ParseError { line, kind };
        let code = raw.split('#').next().unwrap_or("").trim();
        if code.is_empty() {
            // A comment-only line is not a rung separator.
            if raw.trim().is_empty() {
                if let Some(rung) = &open {
                    return Err(ParseError {
                        line: rung.start_line,
                        kind: ParseErrorKind::MissingOut,
                    });
                }
            }
            continue;
        }

        let mut words = code.split_whitespace();
        let opcode: Opcode = words.next().unwrap_or_default().parse().map_err(err)?;
        let operand = match (words.next(), words.next()) {
            (Some(word), None) => word.parse::<Operand>().map_err(err)?,
            _ => return Err(err(ParseErrorKind::Arity(opcode))),
        };

        if opcode == Opcode::Out && matches!(operand, Operand::X(_)) {
            return Err(err(ParseErrorKind::OutToInput(operand)));
        }

        match (opcode, open.as_mut()) {
            (Opcode::Ld | Opcode::Ldi, None) => {
                open = Some(OpenRung {
                    first: Contact {
                        operand,
                        negated: opcode == Opcode::Ldi,
                    },
                    rest: Vec::new(),
                    start_line: line,
                });
            }
            (Opcode::Ld | Opcode::Ldi, Some(_)) => {
                return Err(err(ParseErrorKind::LoadMidRung(opcode)));
            }
            (_, None) => return Err(err(ParseErrorKind::RungStart(opcode))),
            (Opcode::Out, Some(_)) => {
                let coil = match operand {
                    Operand::X(_) => unreachable!("rejected above"),
                    Operand::Y(i) => Coil::Y(i),
                    Operand::M(i) => Coil::M(i),
                };
                if let Some((_, first_line)) = coil_lines.iter().find(|(c, _)| *c == coil) {
                    warnings.push(Warning {
                        line,
                        message: format!(
                            "duplicate coil {coil} (first driven on line {first_line}); last write wins"
                        ),
                    });
                }
                coil_lines.push((coil, line));
                let rung = open.take().expect("matched Some");
                rungs.push(Rung {
                    first: rung.first,
                    rest: rung.rest,
                    coil,
                });
            }
            (contact_op, Some(rung)) => {
                let (combine, negated) = match contact_op {
                    Opcode::And => (Combine::And, false),
                    Opcode::Ani => (Combine::And, true),
                    Opcode::Or => (Combine::Or, false),
                    Opcode::Ori => (Combine::Or, true),
                    Opcode::Ld | Opcode::Ldi | Opcode::Out => unreachable!("handled above"),
                };
                rung.rest.push((combine, Contact { operand, negated }));
            }
        }
    }

    if let Some(rung) = open {
        return Err(ParseError {
            line: rung.start_line,
            kind: ParseErrorKind::MissingOut,
        });
    }
    Ok(LadderProgram { rungs, warnings })
}

/// Input, output and internal-relay images of the PLC.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize)]
pub struct ImageTables {
    input: u8,
    output: u8,
    internal: u16,
}

impl ImageTables {
    pub fn new(input: u8, output: u8, internal: u16) -> Self {
        ImageTables {
            input,
            output: output & OUTPUT_MASK,
            internal,
        }
    }

    pub fn with_input(input: u8) -> Self {
        ImageTables::new(input, 0, 0)
    }

    pub fn input(&self) -> u8 {
        self.input
    }

    pub fn output(&self) -> u8 {
        self.output
    }

    pub fn internal(&self) -> u16 {
        self.internal
    }

    pub fn set_input(&mut self, input: u8) {
        self.input = input;
    }

    pub fn bit(&self, operand: Operand) -> bool {
        match operand {
            Operand::X(i) => self.input >> i & 1 == 1,
            Operand::Y(i) => self.output >> i & 1 == 1,
            Operand::M(i) => self.internal >> i & 1 == 1,
        }
    }

    fn write(&mut self, coil: Coil, value: bool) {
        match coil {
            Coil::Y(i) => {
                self.output = (self.output & !(1 << i)) | (u8::from(value) << i);
            }
            Coil::M(i) => {
                self.internal = (self.internal & !(1 << i)) | (u16::from(value) << i);
            }
        }
    }
}

impl fmt::Display for ImageTables {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "X={:08b} Y={:06b} M={:016b}",
            self.input, self.output, self.internal
        )
    }
}

/// One scan: logic over the input snapshot, then the output image is
/// committed. Y/M reads see bits written earlier in the same scan, or the
/// previous scan's value. Outputs no rung drives are forced low.
pub fn scan_cycle(program: &LadderProgram, images: &ImageTables) -> ImageTables {
    let mut next = *images;
    let mut driven: u8 = 0;
    for rung in &program.rungs {
        let contact = |c: &Contact| next.bit(c.operand) != c.negated;
        let mut acc = contact(&rung.first);
        for (combine, c) in &rung.rest {
            acc = match combine {
                Combine::And => acc && contact(c),
                Combine::Or => acc || contact(c),
            };
        }
        next.write(rung.coil, acc);
        if let Coil::Y(i) = rung.coil {
            driven |= 1 << i;
        }
    }
    next.output &= driven;
    next.input = images.input;
    next
}
