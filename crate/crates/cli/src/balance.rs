//! Decides when accumulated REPL input forms one complete submission.
//!
//! This is only a parenthesis counter that skips string literals; the
//! server remains the authority on syntax.

#[derive(Debug, Default)]
pub struct Balance {
    depth: i64,
    in_string: bool,
    escaped: bool,
    has_content: bool,
}

impl Balance {
    pub fn feed(&mut self, text: &str) {
        for c in text.chars() {
            if self.in_string {
                match c {
                    _ if self.escaped => self.escaped = false,
                    '\\' => self.escaped = true,
                    '"' => self.in_string = false,
                    _ => {}
                }
                continue;
            }
            match c {
                '(' => self.depth += 1,
                ')' => self.depth -= 1,
                '"' => self.in_string = true,
                _ => {}
            }
            if !c.is_whitespace() {
                self.has_content = true;
            }
        }
    }

    /// True once the input holds something and every paren is closed (or
    /// over-closed, which the server will reject).
    pub fn is_complete(&self) -> bool {
        self.has_content && !self.in_string && self.depth <= 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn complete(lines: &[&str]) -> bool {
        let mut b = Balance::default();
        for l in lines {
            b.feed(l);
            b.feed("\n");
        }
        b.is_complete()
    }

    #[test]
    fn counts_parens_across_lines() {
        assert!(complete(&["(+ 1 2)"]));
        assert!(!complete(&["(+ 1"]));
        assert!(complete(&["(+ 1", "  2)"]));
        assert!(complete(&["x"]));
        assert!(!complete(&["", "  "]));
        assert!(complete(&["())"]));
    }

    #[test]
    fn ignores_parens_in_strings() {
        assert!(!complete(&["(cw \")\""]));
        assert!(complete(&["(cw \"(\")"]));
        assert!(!complete(&["(cw \"abc"]));
        assert!(complete(&["(cw \"a", "b\")"]));
        assert!(complete(&["(cw \"\\\")\")"]));
    }
}
