/**
 * Pure HTML rendering of a ConversationState. render(state) depends on
 * nothing else, so a replayed event stream yields an identical DOM snapshot.
 */

import type { AnswerPayload, ChatMessage, TraceEvent } from "./types.js";
import type { ConversationState } from "./state.js";

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

/** Paper ids resolve to their arXiv abstract page; web sources keep their URL. */
export function resolveSourceLink(sourceId: string): string {
  if (/^https?:\/\//.test(sourceId)) {
    return sourceId;
  }
  return `https://arxiv.org/abs/${encodeURIComponent(sourceId)}`;
}

/** Badge numbers per distinct source, in order of first citation. */
export function badgeNumbers(answer: AnswerPayload): Map<string, number> {
  const numbers = new Map<string, number>();
  for (const citation of answer.citations) {
    if (!numbers.has(citation.source_id)) {
      numbers.set(citation.source_id, numbers.size + 1);
    }
  }
  return numbers;
}

export function renderAnswer(answer: AnswerPayload): string {
  const numbers = badgeNumbers(answer);
  const bySentence = new Map<number, { source: string; marker: number }>();
  for (const citation of answer.citations) {
    bySentence.set(citation.sentence_index, {
      source: citation.source_id,
      marker: numbers.get(citation.source_id) ?? 0,
    });
  }
  const parts: string[] = [];
  if (answer.sentences.length === 0) {
    parts.push(escapeHtml(answer.text));
  }
  answer.sentences.forEach((span, index) => {
    parts.push(escapeHtml(answer.text.slice(span.start, span.end)));
    const badge = bySentence.get(index);
    if (badge) {
      parts.push(
        `<sup class="citation-badge" data-source="${escapeHtml(badge.source)}">` +
          `<a href="${escapeHtml(resolveSourceLink(badge.source))}" target="_blank" rel="noopener">` +
          `[${badge.marker}]</a></sup>`,
      );
    }
  });
  const sources = [...numbers.entries()]
    .map(
      ([source, marker]) =>
        `<li>[${marker}] <a href="${escapeHtml(resolveSourceLink(source))}" target="_blank" rel="noopener">` +
        `${escapeHtml(source)}</a></li>`,
    )
    .join("");
  const sourceBlock = sources ? `<ol class="sources">${sources}</ol>` : "";
  return `<div class="answer-text">${parts.join("")}</div>${sourceBlock}`;
}

function renderMessage(message: ChatMessage): string {
  if (message.role === "assistant" && message.answer) {
    return `<div class="bubble assistant">${renderAnswer(message.answer)}</div>`;
  }
  if (message.role === "clarification") {
    const questions = (message.questions ?? [])
      .map((q) => `<li class="clarification-question">${escapeHtml(q)}</li>`)
      .join("");
    return `<div class="bubble clarification"><p>Before answering, please clarify:</p><ul>${questions}</ul></div>`;
  }
  return `<div class="bubble ${message.role}">${escapeHtml(message.text)}</div>`;
}

function renderChips(state: ConversationState): string {
  const chips: string[] = [];
  if (state.rewrittenQuery !== null) {
    chips.push(
      `<span class="chip chip-rewritten" title="rewritten query">${escapeHtml(state.rewrittenQuery)}</span>`,
    );
  }
  state.subQueries.forEach((subQuery, index) => {
    chips.push(
      `<span class="chip chip-subquery" data-subquery="${index}">${index + 1}. ${escapeHtml(subQuery)}</span>`,
    );
  });
  return chips.length ? `<div class="chips">${chips.join("")}</div>` : "";
}

function renderPassages(state: ConversationState): string {
  if (!state.passages.length) {
    return "";
  }
  const cards = state.passages
    .map(
      (card) =>
        `<details class="passage-card" data-subquery="${card.subQueryIndex}">` +
        `<summary>${escapeHtml(card.sourceId)} <span class="member-count">(${card.members.length})</span></summary>` +
        `<ul>${card.members.map((m) => `<li>${escapeHtml(m)}</li>`).join("")}</ul>` +
        `</details>`,
    )
    .join("");
  return `<div class="passages">${cards}</div>`;
}

function renderSubAnswers(state: ConversationState): string {
  if (!state.subAnswers.length) {
    return "";
  }
  const blocks = state.subAnswers
    .map(
      (sub) =>
        `<div class="sub-answer" data-subquery="${sub.subQueryIndex}">` +
        `<span class="sub-answer-label">Sub-answer ${sub.subQueryIndex + 1}</span> ${escapeHtml(sub.text)}</div>`,
    )
    .join("");
  return `<div class="sub-answers">${blocks}</div>`;
}

/** Events grouped by kind, collapsed by default, tagged by sub-query. */
export function renderTracePanel(events: TraceEvent[]): string {
  const order: string[] = [];
  const groups = new Map<string, TraceEvent[]>();
  for (const event of events) {
    if (!groups.has(event.kind)) {
      groups.set(event.kind, []);
      order.push(event.kind);
    }
    groups.get(event.kind)!.push(event);
  }
  const sections = order
    .map((kind) => {
      const members = groups.get(kind)!;
      const rows = members
        .map((event) => {
          const sub = event.payload.sub_query_index;
          const tab = sub === undefined ? "" : `<span class="trace-tab">sub-query ${Number(sub) + 1}</span>`;
          return `<div class="trace-row" data-seq="${event.seq}">${tab}<code>${escapeHtml(
            JSON.stringify(event.payload),
          )}</code></div>`;
        })
        .join("");
      return (
        `<details class="trace-group" data-kind="${escapeHtml(kind)}">` +
        `<summary>${escapeHtml(kind)} <span class="count">(${members.length})</span></summary>${rows}</details>`
      );
    })
    .join("");
  return `<aside class="trace-panel">${sections}</aside>`;
}

function renderInput(state: ConversationState): string {
  if (state.pendingQuestions !== null) {
    return (
      `<form id="reply-form" class="input-row">` +
      `<input id="reply-input" name="reply" type="text" placeholder="Your clarification..." autocomplete="off" />` +
      `<button type="submit">Reply</button></form>`
    );
  }
  const disabled = state.turnInFlight ? " disabled" : "";
  return (
    `<form id="chat-form" class="input-row">` +
    `<input id="chat-input" name="text" type="text" placeholder="Ask a research question..." autocomplete="off"${disabled} />` +
    `<button type="submit"${disabled}>Send</button></form>`
  );
}

export function renderConversation(state: ConversationState): string {
  const banner = state.banner
    ? `<div class="banner">${escapeHtml(state.banner)} <button id="retry-button">Retry</button></div>`
    : "";
  const messages = state.messages.map(renderMessage).join("");
  const working = state.turnInFlight ? `<div class="working">thinking...</div>` : "";
  return (
    `<div class="conversation" data-session="${escapeHtml(state.sessionId ?? "")}">` +
    banner +
    `<main class="messages">${messages}${renderChips(state)}${renderPassages(state)}` +
    `${renderSubAnswers(state)}${working}</main>` +
    renderTracePanel(state.events) +
    renderInput(state) +
    `</div>`
  );
}
