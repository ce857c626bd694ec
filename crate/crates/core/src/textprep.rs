//! Text cleaning, tokenization and lemmatization.
//!
//! Every report component (title, description, question, answers) passes
//! through the same [`Analyzer`] before it is indexed or scored, so query and
//! corpus always share one vocabulary.

use std::collections::HashMap;
use std::sync::OnceLock;

use regex::Regex;

/// Punctuation that survives cleaning. Everything else that is not
/// alphanumeric or whitespace is treated as noise.
const KEPT_PUNCT: &[char] = &[
    '.', ',', ';', ':', '!', '?', '\'', '"', '(', ')', '[', ']', '{', '}', '_', '-', '+', '/',
    '=', '<', '>', '#', '@', '%', '&', '*',
];

const MAX_CLEAN_PASSES: usize = 16;

struct Patterns {
    ansi: Regex,
    literal_escape: Regex,
    md_image: Regex,
    html_img: Regex,
    html_video: Regex,
    html_video_open: Regex,
    media_url: Regex,
    url: Regex,
    www: Regex,
    java_frame: Regex,
    indented_at: Regex,
    traceback_head: Regex,
    exception_tail: Regex,
    fence: Regex,
}

fn patterns() -> &'static Patterns {
    static P: OnceLock<Patterns> = OnceLock::new();
    P.get_or_init(|| Patterns {
        ansi: Regex::new(r"\x1b\[[0-9;]*[A-Za-z]").unwrap(),
        literal_escape: Regex::new(r"\\(?:[nrtfvb0]|u[0-9a-fA-F]{4}|x[0-9a-fA-F]{2})").unwrap(),
        md_image: Regex::new(r"!\[[^\]]*\]\([^)]*\)").unwrap(),
        html_img: Regex::new(r"(?i)<img\b[^>]*>").unwrap(),
        html_video: Regex::new(r"(?is)<video\b[^>]*>.*?</video\s*>").unwrap(),
        html_video_open: Regex::new(r"(?i)<video\b[^>]*>").unwrap(),
        media_url: Regex::new(
            r"(?i)\bhttps?://\S+\.(?:png|jpe?g|gif|bmp|svg|webp|mp4|mov|webm|avi|mkv)\b",
        )
        .unwrap(),
        url: Regex::new(r"(?i)\b(?:https?|ftp)://\S+").unwrap(),
        www: Regex::new(r"(?i)\bwww\.\S+").unwrap(),
        java_frame: Regex::new(r"^\s*at\s+[\w$]+(?:\.[\w$<>]+){2,}\(.*\)\s*$").unwrap(),
        indented_at: Regex::new(r"^\s+at\s").unwrap(),
        traceback_head: Regex::new(r"Traceback \(most recent call last\)").unwrap(),
        exception_tail: Regex::new(
            r"^[A-Za-z_][\w.]*(?:Error|Exception|Warning|Exit|Interrupt)\b",
        )
        .unwrap(),
        fence: Regex::new(r"^\s*(?:```|~~~)").unwrap(),
    })
}

/// Per-line mask of lines that belong to a stack trace.
fn stack_trace_mask(lines: &[&str]) -> Vec<bool> {
    let p = patterns();
    let mut mask = vec![false; lines.len()];

    for (i, line) in lines.iter().enumerate() {
        if p.java_frame.is_match(line) {
            mask[i] = true;
        }
    }

    // runs of >= 3 indented "at ..." lines
    let mut i = 0;
    while i < lines.len() {
        if p.indented_at.is_match(lines[i]) {
            let start = i;
            while i < lines.len() && p.indented_at.is_match(lines[i]) {
                i += 1;
            }
            if i - start >= 3 {
                mask[start..i].iter_mut().for_each(|m| *m = true);
            }
        } else {
            i += 1;
        }
    }

    // python tracebacks: header, indented frames, final exception line
    let mut i = 0;
    while i < lines.len() {
        if p.traceback_head.is_match(lines[i]) {
            mask[i] = true;
            i += 1;
            while i < lines.len()
                && lines[i].starts_with(char::is_whitespace)
                && !lines[i].trim().is_empty()
            {
                mask[i] = true;
                i += 1;
            }
            if i < lines.len() && p.exception_tail.is_match(lines[i].trim_start()) {
                mask[i] = true;
                i += 1;
            }
        } else {
            i += 1;
        }
    }
    mask
}

/// True when `text` contains any recognised stack-trace pattern.
pub fn contains_stack_trace(text: &str) -> bool {
    let lines: Vec<&str> = text.lines().collect();
    stack_trace_mask(&lines).into_iter().any(|m| m)
}

/// True when `text` embeds image or video markup (markdown images, `<img>`,
/// `<video>`, or links to media files).
pub fn contains_media(text: &str) -> bool {
    let p = patterns();
    p.md_image.is_match(text)
        || p.html_img.is_match(text)
        || p.html_video_open.is_match(text)
        || p.media_url.is_match(text)
}

/// Line counts of every fenced code block in `text`. An unterminated fence
/// runs to the end of the text. Inline code spans are not counted.
pub fn fenced_block_line_counts(text: &str) -> Vec<usize> {
    let p = patterns();
    let mut blocks = Vec::new();
    let mut inside: Option<usize> = None;
    for line in text.lines() {
        if p.fence.is_match(line) {
            match inside.take() {
                Some(n) => blocks.push(n),
                None => inside = Some(0),
            }
        } else if let Some(n) = inside.as_mut() {
            *n += 1;
        }
    }
    if let Some(n) = inside {
        blocks.push(n);
    }
    blocks
}

fn clean_pass(text: &str) -> String {
    let p = patterns();
    let text = p.ansi.replace_all(text, " ");
    let text = p.literal_escape.replace_all(&text, " ");

    let lines: Vec<&str> = text.lines().collect();
    let mask = stack_trace_mask(&lines);
    let text = lines
        .iter()
        .zip(mask)
        .filter(|(_, trace)| !trace)
        .map(|(l, _)| *l)
        .collect::<Vec<_>>()
        .join("\n");

    let text = p.html_video.replace_all(&text, " ");
    let text = p.html_video_open.replace_all(&text, " ");
    let text = p.md_image.replace_all(&text, " ");
    let text = p.html_img.replace_all(&text, " ");
    let text = p.url.replace_all(&text, " ");
    let text = p.www.replace_all(&text, " ");

    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars() {
        let keep = c.is_alphanumeric() || KEPT_PUNCT.contains(&c);
        if keep {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else if c.is_whitespace() || c.is_control() {
            pending_space = true;
        }
        // other symbols are dropped without introducing a break
    }
    out
}

/// Removes URLs, media markup, escape sequences, stack traces and special
/// characters, then collapses whitespace. Idempotent.
pub fn clean(text: &str) -> String {
    let mut cur = clean_pass(text);
    for _ in 0..MAX_CLEAN_PASSES {
        let next = clean_pass(&cur);
        if next == cur {
            break;
        }
        cur = next;
    }
    cur
}

/// Lowercase tokens plus their byte spans in the text they were cut from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TokenStream {
    pub tokens: Vec<String>,
    pub spans: Vec<(usize, usize)>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(String::as_str)
    }

    pub fn into_tokens(self) -> Vec<String> {
        self.tokens
    }
}

fn is_token_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_'
}

/// Splits on every character that is neither alphanumeric nor `_`, and
/// lowercases. `"v2.3.1-rc"` becomes `[v2, 3, 1, rc]`.
pub fn tokenize(text: &str) -> TokenStream {
    let mut ts = TokenStream::default();
    let mut start: Option<usize> = None;
    for (i, c) in text.char_indices() {
        match (is_token_char(c), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                ts.tokens.push(text[s..i].to_lowercase());
                ts.spans.push((s, i));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        ts.tokens.push(text[s..].to_lowercase());
        ts.spans.push((s, text.len()));
    }
    ts
}

fn irregular_forms() -> &'static HashMap<&'static str, &'static str> {
    static T: OnceLock<HashMap<&'static str, &'static str>> = OnceLock::new();
    T.get_or_init(|| {
        [
            ("children", "child"),
            ("men", "man"),
            ("women", "woman"),
            ("feet", "foot"),
            ("mice", "mouse"),
            ("indices", "index"),
            ("matrices", "matrix"),
            ("vertices", "vertex"),
            ("analyses", "analysis"),
            ("is", "be"),
            ("are", "be"),
            ("was", "be"),
            ("were", "be"),
            ("been", "be"),
            ("being", "be"),
            ("has", "have"),
            ("had", "have"),
            ("having", "have"),
            ("does", "do"),
            ("did", "do"),
            ("done", "do"),
            ("doing", "do"),
            ("went", "go"),
            ("gone", "go"),
            ("goes", "go"),
            ("ran", "run"),
            ("got", "get"),
            ("gotten", "get"),
            ("made", "make"),
            ("built", "build"),
            ("threw", "throw"),
            ("thrown", "throw"),
            ("wrote", "write"),
            ("written", "write"),
            ("broke", "break"),
            ("broken", "break"),
            ("took", "take"),
            ("taken", "take"),
            ("gave", "give"),
            ("given", "give"),
            ("found", "find"),
            ("saw", "see"),
            ("seen", "see"),
            ("sent", "send"),
            ("said", "say"),
            ("using", "use"),
            ("used", "use"),
            ("uses", "use"),
        ]
        .into_iter()
        .collect()
    })
}

/// Words whose suffixes look inflectional but are not.
const PROTECTED: &[&str] = &[
    "this", "his", "its", "always", "perhaps", "various", "previous", "status", "bus", "virus",
    "focus", "bonus", "plus", "thus", "alias", "canvas", "atlas", "series", "species", "news",
    "lens", "nothing", "something", "anything", "everything", "thing", "string", "ring", "bring",
    "during", "morning", "spring", "king", "sing", "wing", "swing", "ceiling", "evening", "red",
    "bed", "need", "seed", "speed", "feed", "embed", "shed", "hundred", "indeed", "proceed",
    "succeed", "exceed", "bleed", "breed", "sled", "wed", "fed", "led",
];

fn is_vowel(bytes: &[u8], i: usize) -> bool {
    match bytes[i] {
        b'a' | b'e' | b'i' | b'o' | b'u' => true,
        b'y' => i > 0 && !is_vowel(bytes, i - 1),
        _ => false,
    }
}

/// Number of vowel-consonant sequences, as in Porter's "measure".
fn measure(stem: &str) -> usize {
    let b = stem.as_bytes();
    let mut m = 0;
    let mut prev_vowel = false;
    for i in 0..b.len() {
        let v = is_vowel(b, i);
        if prev_vowel && !v {
            m += 1;
        }
        prev_vowel = v;
    }
    m
}

fn ends_cvc(stem: &str) -> bool {
    let b = stem.as_bytes();
    let n = b.len();
    n >= 3
        && !is_vowel(b, n - 3)
        && is_vowel(b, n - 2)
        && !is_vowel(b, n - 1)
        && !matches!(b[n - 1], b'w' | b'x' | b'y')
}

fn ends_double_consonant(stem: &str) -> bool {
    let b = stem.as_bytes();
    let n = b.len();
    n >= 2 && b[n - 1] == b[n - 2] && !is_vowel(b, n - 1)
}

/// Repairs a stem left after stripping `-ing`/`-ed`.
fn restore_stem(stem: &str) -> String {
    if ends_double_consonant(stem) && !matches!(stem.as_bytes()[stem.len() - 1], b'l' | b's' | b'z')
    {
        stem[..stem.len() - 1].to_string()
    } else if measure(stem) == 1 && ends_cvc(stem) {
        format!("{stem}e")
    } else {
        stem.to_string()
    }
}

fn apply_rules(w: &str) -> String {
    if let Some(base) = irregular_forms().get(w) {
        return (*base).to_string();
    }
    if w.len() < 4 || !w.bytes().all(|b| b.is_ascii_lowercase()) || PROTECTED.contains(&w) {
        return w.to_string();
    }
    let has_vowel = |s: &str| {
        let b = s.as_bytes();
        (0..b.len()).any(|i| is_vowel(b, i))
    };

    if let Some(stem) = w.strip_suffix("ies") {
        if stem.len() >= 2 {
            return format!("{stem}y");
        }
    }
    if let Some(stem) = w.strip_suffix("ied") {
        if stem.len() >= 2 {
            return format!("{stem}y");
        }
    }
    if w.ends_with("sses") {
        return w[..w.len() - 2].to_string();
    }
    if ["xes", "ches", "shes", "zes"].iter().any(|s| w.ends_with(s)) {
        return w[..w.len() - 2].to_string();
    }
    if let Some(stem) = w.strip_suffix("ing") {
        if stem.len() >= 3 && has_vowel(stem) {
            return restore_stem(stem);
        }
        return w.to_string();
    }
    if w.ends_with("eed") {
        return w.to_string();
    }
    if let Some(stem) = w.strip_suffix("ed") {
        if stem.len() >= 3 && has_vowel(stem) {
            return restore_stem(stem);
        }
        return w.to_string();
    }
    if w.ends_with('s') && !w.ends_with("ss") && !w.ends_with("us") && !w.ends_with("is") {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

/// Rule-based English lemma of a lowercase token. Tokens containing digits,
/// underscores or non-ASCII letters pass through unchanged. The mapping is
/// idempotent: a rewrite is only accepted when the rules leave its output
/// fixed.
pub fn lemmatize_word(w: &str) -> String {
    let once = apply_rules(w);
    if once == w {
        return once;
    }
    if apply_rules(&once) == once {
        once
    } else {
        w.to_string()
    }
}

/// Lemmatizes every token, keeping spans.
pub fn lemmatize(ts: &TokenStream) -> TokenStream {
    TokenStream {
        tokens: ts.tokens.iter().map(|t| lemmatize_word(t)).collect(),
        spans: ts.spans.clone(),
    }
}

/// The clean → tokenize → lemmatize pipeline.
#[derive(Debug, Clone, Copy)]
pub struct Analyzer {
    pub lemmatize: bool,
}

impl Default for Analyzer {
    fn default() -> Self {
        Analyzer { lemmatize: true }
    }
}

impl Analyzer {
    /// Analyzer used for embedding lookups, where surface forms match the
    /// pretrained vocabulary better than lemmas.
    pub fn surface() -> Self {
        Analyzer { lemmatize: false }
    }

    pub fn analyze(&self, text: &str) -> Vec<String> {
        let ts = tokenize(&clean(text));
        if self.lemmatize {
            lemmatize(&ts).into_tokens()
        } else {
            ts.into_tokens()
        }
    }
}
