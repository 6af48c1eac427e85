//! Fixed token estimator.
//!
//! Each CJK character counts as one token and each whitespace-delimited run
//! of non-CJK characters counts as 1.6 tokens; the sum is rounded up once at
//! the end. Arithmetic is done in tenths so results are exact.

const CJK_TENTHS: u64 = 10;
const WORD_TENTHS: u64 = 16;

/// CJK ideographs, kana, hangul, CJK punctuation and full-width forms.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x2E80..=0x2FDF      // radicals
        | 0x3000..=0x303F    // CJK symbols and punctuation
        | 0x3040..=0x30FF    // hiragana, katakana
        | 0x3100..=0x312F    // bopomofo
        | 0x3130..=0x318F    // hangul compatibility jamo
        | 0x31C0..=0x31EF    // strokes
        | 0x3200..=0x33FF    // enclosed, compatibility
        | 0x3400..=0x4DBF    // extension A
        | 0x4E00..=0x9FFF    // unified ideographs
        | 0xAC00..=0xD7AF    // hangul syllables
        | 0xF900..=0xFAFF    // compatibility ideographs
        | 0xFE30..=0xFE4F    // compatibility forms
        | 0xFF00..=0xFFEF    // half/full-width forms
        | 0x20000..=0x2FA1F  // supplementary ideographs
    )
}

/// Running estimate over a character stream, so chunk bounds can be probed
/// one character at a time.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TokenCounter {
    tenths: u64,
    in_word: bool,
}

impl TokenCounter {
    pub fn push(&mut self, c: char) {
        if is_cjk(c) {
            self.tenths += CJK_TENTHS;
            self.in_word = false;
        } else if c.is_whitespace() {
            self.in_word = false;
        } else if !self.in_word {
            self.tenths += WORD_TENTHS;
            self.in_word = true;
        }
    }

    pub fn tokens(&self) -> u64 {
        self.tenths.div_ceil(10)
    }
}

pub fn estimate_tokens(text: &str) -> u64 {
    let mut counter = TokenCounter::default();
    text.chars().for_each(|c| counter.push(c));
    counter.tokens()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn latin_words() {
        // 2 words -> ceil(3.2)
        assert_eq!(estimate_tokens("abc def"), 4);
        assert_eq!(estimate_tokens("one"), 2);
        assert_eq!(estimate_tokens("a b c d e"), 8);
        assert_eq!(estimate_tokens(""), 0);
        assert_eq!(estimate_tokens("  \n\t "), 0);
    }

    #[test]
    fn cjk_and_mixed() {
        assert_eq!(estimate_tokens("红灯停"), 3);
        assert_eq!(estimate_tokens("红灯停。"), 4);
        // "abc" + 2 CJK + "def": 1.6 + 2 + 1.6 = 5.2
        assert_eq!(estimate_tokens("abc中文def"), 6);
        assert_eq!(estimate_tokens("GPS定位"), 4);
    }

    #[test]
    fn monotone_in_prefix() {
        let text = "Hello 世界, this is a test。再来一句 ok";
        let mut counter = TokenCounter::default();
        let mut last = 0;
        for c in text.chars() {
            counter.push(c);
            assert!(counter.tokens() >= last);
            assert!(counter.tokens() - last <= 2);
            last = counter.tokens();
        }
        assert_eq!(last, estimate_tokens(text));
    }
}
