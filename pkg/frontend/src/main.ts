// Operator console entry point.
//
//   node dist/main.js --connect 127.0.0.1:8787 --operator alice
//
// Commands typed at the prompt:
//   approve <ticket_id> | deny <ticket_id>
//   pause <session_id> | stop <session_id> | resume <session_id>
//   quit
//
// Controls that are illegal under the advertised authority mode are
// rejected locally before anything is sent; the server still validates
// every message it receives.

import * as readline from 'node:readline';

import { ConsoleClient } from './client.js';
import { Verb, verbLegal } from './protocol.js';
import { render } from './ui.js';

function parseArgs(argv: string[]): { host: string; port: number; operator: string } {
  let endpoint = '127.0.0.1:8787';
  let operator = 'operator';
  for (let i = 0; i < argv.length; i++) {
    if (argv[i] === '--connect' && argv[i + 1]) endpoint = argv[++i];
    else if (argv[i] === '--operator' && argv[i + 1]) operator = argv[++i];
  }
  const [host, portRaw] = endpoint.split(':');
  return { host: host || '127.0.0.1', port: Number(portRaw || '8787'), operator };
}

const VERBS: Verb[] = ['approve', 'deny', 'pause', 'stop', 'resume', 'takeover'];

function main(): void {
  const { host, port, operator } = parseArgs(process.argv.slice(2));
  const client = new ConsoleClient({ host, port, operator });

  let dirty = true;
  client.onChange(() => {
    dirty = true;
  });
  const repaint = setInterval(() => {
    if (!dirty) return;
    dirty = false;
    console.clear();
    process.stdout.write(render(client.state));
    process.stdout.write('> ');
  }, 250);

  const rl = readline.createInterface({ input: process.stdin, output: process.stdout, prompt: '> ' });
  rl.on('line', (line) => {
    const [verbRaw, target] = line.trim().split(/\s+/);
    if (!verbRaw) return rl.prompt();
    if (verbRaw === 'quit' || verbRaw === 'exit') {
      rl.close();
      return;
    }
    const verb = VERBS.find((v) => v === verbRaw);
    if (!verb || !target) {
      console.log(`usage: <${VERBS.join('|')}> <ticket_id|session_id>`);
      return rl.prompt();
    }
    const mode = client.state.authorityMode ?? '';
    if (!verbLegal(mode, verb)) {
      console.log(`verb '${verb}' is disabled under authority mode '${mode}'`);
      return rl.prompt();
    }
    if (verb === 'approve' || verb === 'deny') client.decide(target, verb);
    else client.command(target, verb);
    rl.prompt();
  });
  rl.on('close', () => {
    clearInterval(repaint);
    client.close();
    process.exit(0);
  });

  client.connect();
}

main();
